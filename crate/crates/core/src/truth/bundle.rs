//! On-disk ground-truth bundles.
//!
//! A bundle is a directory holding `manifest.json`, CSV tables and (optionally)
//! the retrained checkpoints. The manifest records a SHA-256 for every other
//! file; [`verify_bundle`] refuses a bundle whose files do not match.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{LooTruth, NoisyTruth, SubsetTruth};
use crate::error::{Error, Result};
use crate::modelzoo::{Head, ModelSpec};

pub const BUNDLE_SCHEMA_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TruthKind {
    Loo,
    Lds,
    Noisy,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TruthData {
    Loo(LooTruth),
    Subsets(SubsetTruth),
    Noisy(NoisyTruth),
}

impl TruthData {
    pub fn kind(&self) -> TruthKind {
        match self {
            TruthData::Loo(_) => TruthKind::Loo,
            TruthData::Subsets(_) => TruthKind::Lds,
            TruthData::Noisy(_) => TruthKind::Noisy,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema_version: u32,
    pub kind: TruthKind,
    pub seeds: Vec<u64>,
    pub m: Option<usize>,
    pub alpha: Option<f64>,
    pub fraction: Option<f64>,
    pub head: Option<Head>,
    pub n_train: usize,
    pub n_test: usize,
    /// SHA-256 of the model spec's JSON form.
    pub spec_hash: String,
    /// Caller-supplied digest of everything the bundle was generated from;
    /// used to decide whether an existing bundle can be reused.
    pub config_hash: String,
    /// File name → SHA-256 for every file in the bundle but the manifest.
    pub files: BTreeMap<String, String>,
}

pub fn spec_hash(spec: &ModelSpec) -> String {
    let json = serde_json::to_vec(spec).expect("model spec serialises");
    format!("{:x}", Sha256::digest(json))
}

fn file_hash(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(format!("{:x}", Sha256::digest(bytes)))
}

fn integrity(dir: &Path, what: impl std::fmt::Display) -> Error {
    Error::Integrity(format!("{}: {what}", dir.display()))
}

fn write_table(path: &Path, header: Vec<String>, rows: impl Iterator<Item = Vec<String>>) -> Result<()> {
    let csv_err = |e: csv::Error| Error::Format(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(&header).map_err(csv_err)?;
    for r in rows {
        w.write_record(&r).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_table(dir: &Path, name: &str) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let path = dir.join(name);
    let bad = |e: csv::Error| integrity(dir, format!("{name}: {e}"));
    let mut r = csv::Reader::from_path(&path).map_err(bad)?;
    let header = r.headers().map_err(bad)?.iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| rec.map(|rec| rec.iter().map(String::from).collect()).map_err(bad))
        .collect::<Result<_>>()?;
    Ok((header, rows))
}

fn output_header(first: &str, n_test: usize) -> Vec<String> {
    std::iter::once(first.to_string()).chain((0..n_test).map(|t| format!("out_{t}"))).collect()
}

fn output_row(key: String, values: &[f64]) -> Vec<String> {
    std::iter::once(key).chain(values.iter().map(|v| format!("{v:e}"))).collect()
}

fn parse<T: std::str::FromStr>(dir: &Path, s: &str) -> Result<T> {
    s.parse().map_err(|_| integrity(dir, format!("unparseable field {s:?}")))
}

/// Writes the tables for `data`, then a manifest hashing every file now in
/// `dir` (including checkpoints saved there during generation).
pub fn write_bundle(dir: &Path, data: &TruthData, spec: &ModelSpec, config_hash: &str) -> Result<Manifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (mut m, mut alpha, mut fraction, mut head) = (None, None, None, None);
    let (seed, n_train, n_test) = match data {
        TruthData::Loo(t) => {
            head = Some(t.head);
            write_table(
                &dir.join("outputs.csv"),
                output_header("removed", t.n_test),
                std::iter::once(output_row("none".into(), &t.base_outputs))
                    .chain((0..t.n_train).map(|j| output_row(j.to_string(), &t.loo_outputs[j * t.n_test..(j + 1) * t.n_test]))),
            )?;
            (t.seed, t.n_train, t.n_test)
        }
        TruthData::Subsets(t) => {
            (m, alpha, head) = (Some(t.m()), Some(t.alpha), Some(t.head));
            write_table(
                &dir.join("outputs.csv"),
                output_header("subset", t.n_test),
                (0..t.m()).map(|j| output_row(j.to_string(), &t.outputs[j * t.n_test..(j + 1) * t.n_test])),
            )?;
            write_table(
                &dir.join("subsets.csv"),
                vec!["subset".into(), "indices".into()],
                t.subsets.iter().enumerate().map(|(j, s)| {
                    vec![j.to_string(), s.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(" ")]
                }),
            )?;
            (t.seed, t.n_train, t.n_test)
        }
        TruthData::Noisy(t) => {
            fraction = Some(t.fraction);
            write_table(
                &dir.join("labels.csv"),
                ["idx", "original", "corrupted", "flipped"].map(String::from).to_vec(),
                (0..t.flipped.len()).map(|i| {
                    vec![
                        i.to_string(),
                        t.original_labels[i].to_string(),
                        t.corrupted_labels[i].to_string(),
                        (t.flipped[i] as u8).to_string(),
                    ]
                }),
            )?;
            (t.seed, t.flipped.len(), 0)
        }
    };

    let mut files = BTreeMap::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name != MANIFEST && entry.path().is_file() {
            files.insert(name, file_hash(&entry.path())?);
        }
    }
    let manifest = Manifest {
        schema_version: BUNDLE_SCHEMA_VERSION,
        kind: data.kind(),
        seeds: vec![seed],
        m,
        alpha,
        fraction,
        head,
        n_train,
        n_test,
        spec_hash: spec_hash(spec),
        config_hash: config_hash.to_string(),
        files,
    };
    let path = dir.join(MANIFEST);
    let json = serde_json::to_vec_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Parses the manifest and checks every recorded file hash.
pub fn verify_bundle(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let raw = std::fs::read(&path).map_err(|e| integrity(dir, format!("cannot read manifest: {e}")))?;
    let manifest: Manifest =
        serde_json::from_slice(&raw).map_err(|e| integrity(dir, format!("corrupt manifest: {e}")))?;
    if manifest.schema_version != BUNDLE_SCHEMA_VERSION {
        return Err(integrity(dir, format!("schema version {} unsupported", manifest.schema_version)));
    }
    for (name, want) in &manifest.files {
        let got = file_hash(&dir.join(name)).map_err(|_| integrity(dir, format!("{name} missing")))?;
        if &got != want {
            return Err(integrity(dir, format!("{name} does not match its recorded hash")));
        }
    }
    Ok(manifest)
}

fn read_outputs(dir: &Path, first: &str, n_test: usize, rows: usize) -> Result<Vec<Vec<f64>>> {
    let (header, table) = read_table(dir, "outputs.csv")?;
    if header != output_header(first, n_test) || table.len() != rows {
        return Err(integrity(dir, "outputs.csv has the wrong shape"));
    }
    table.iter().map(|r| r[1..].iter().map(|s| parse(dir, s)).collect()).collect()
}

pub fn read_bundle(dir: &Path) -> Result<(Manifest, TruthData)> {
    let man = verify_bundle(dir)?;
    let seed = *man.seeds.first().ok_or_else(|| integrity(dir, "manifest lists no seed"))?;
    let missing = |what: &str| integrity(dir, format!("manifest lacks {what}"));
    let data = match man.kind {
        TruthKind::Loo => {
            let mut outs = read_outputs(dir, "removed", man.n_test, man.n_train + 1)?.into_iter();
            TruthData::Loo(LooTruth {
                n_train: man.n_train,
                n_test: man.n_test,
                base_outputs: outs.next().unwrap_or_default(),
                loo_outputs: outs.flatten().collect(),
                seed,
                head: man.head.ok_or_else(|| missing("head"))?,
            })
        }
        TruthKind::Lds => {
            let m = man.m.ok_or_else(|| missing("m"))?;
            let outs = read_outputs(dir, "subset", man.n_test, m)?;
            let (_, table) = read_table(dir, "subsets.csv")?;
            if table.len() != m {
                return Err(integrity(dir, "subsets.csv has the wrong row count"));
            }
            let subsets = table
                .iter()
                .map(|r| r[1].split_whitespace().map(|s| parse(dir, s)).collect::<Result<Vec<usize>>>())
                .collect::<Result<_>>()?;
            TruthData::Subsets(SubsetTruth {
                n_train: man.n_train,
                n_test: man.n_test,
                subsets,
                outputs: outs.into_iter().flatten().collect(),
                alpha: man.alpha.ok_or_else(|| missing("alpha"))?,
                seed,
                head: man.head.ok_or_else(|| missing("head"))?,
            })
        }
        TruthKind::Noisy => {
            let (_, table) = read_table(dir, "labels.csv")?;
            if table.len() != man.n_train || table.iter().any(|r| r.len() != 4) {
                return Err(integrity(dir, "labels.csv has the wrong shape"));
            }
            let col = |c: usize| table.iter().map(|r| parse::<usize>(dir, &r[c])).collect::<Result<Vec<_>>>();
            TruthData::Noisy(NoisyTruth {
                original_labels: col(1)?,
                corrupted_labels: col(2)?,
                flipped: col(3)?.into_iter().map(|f| f == 1).collect(),
                fraction: man.fraction.ok_or_else(|| missing("fraction"))?,
                seed,
            })
        }
    };
    Ok((man, data))
}
