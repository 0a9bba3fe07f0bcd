//! Line-delimited dataset files and their manifest.
//!
//! A dataset directory holds four JSON-lines files, one record per line, and
//! `manifest.json`:
//!
//! - `concepts.jsonl`: `{"id", "latent": [f64], "text_signature": [str], "image_template": base64}`
//! - `catalog.jsonl`: `{"id", "concept", "text", "height", "width", "channels", "pixels": base64, "text_corrupted", "image_corrupted"}`
//! - `users.jsonl`: `{"id", "preference": [f64]}`
//! - `interactions.jsonl`: `{"user", "timestamp", "item", "bought"}`
//!
//! The manifest records the generator settings, record counts, the split
//! fraction and a SHA-256 checksum of every file.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use camenn_core::embedding::Image;
use camenn_core::synth::{Dataset, InteractionRecord, ItemRecord, LatentConcept, UserRecord};

use crate::config::DataSection;
use crate::error::{CliError, CliResult};

pub const MANIFEST: &str = "manifest.json";
pub const CONCEPTS: &str = "concepts.jsonl";
pub const CATALOG: &str = "catalog.jsonl";
pub const USERS: &str = "users.jsonl";
pub const INTERACTIONS: &str = "interactions.jsonl";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ConceptLine {
    id: usize,
    latent: Vec<f64>,
    text_signature: Vec<String>,
    image_template: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ItemLine {
    id: usize,
    concept: usize,
    text: String,
    height: usize,
    width: usize,
    channels: usize,
    pixels: String,
    text_corrupted: bool,
    image_corrupted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct UserLine {
    id: usize,
    preference: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct InteractionLine {
    user: usize,
    timestamp: u64,
    item: usize,
    bought: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Counts {
    pub concepts: usize,
    pub items: usize,
    pub users: usize,
    pub interactions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileChecksum {
    pub name: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub seed: u64,
    pub generator: DataSection,
    pub counts: Counts,
    pub files: Vec<FileChecksum>,
}

fn to_lines<T: Serialize>(records: impl Iterator<Item = T>) -> CliResult<Vec<u8>> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, &r).map_err(|e| CliError::Format(e.to_string()))?;
        out.push(b'\n');
    }
    Ok(out)
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Serialized file contents, in manifest order.
pub fn encode_files(dataset: &Dataset) -> CliResult<Vec<(&'static str, Vec<u8>)>> {
    let concepts = to_lines(dataset.concepts.iter().map(|c| ConceptLine {
        id: c.id,
        latent: c.latent.clone(),
        text_signature: c.text_signature.clone(),
        image_template: B64.encode(&c.image_template),
    }))?;
    let catalog = to_lines(dataset.items.iter().map(|i| ItemLine {
        id: i.id,
        concept: i.concept,
        text: i.text.clone(),
        height: i.image.height,
        width: i.image.width,
        channels: i.image.channels,
        pixels: B64.encode(&i.image.pixels),
        text_corrupted: i.text_corrupted,
        image_corrupted: i.image_corrupted,
    }))?;
    let users = to_lines(dataset.users.iter().map(|u| UserLine { id: u.id, preference: u.preference.clone() }))?;
    let interactions = to_lines(dataset.interactions.iter().map(|r| InteractionLine {
        user: r.user,
        timestamp: r.timestamp,
        item: r.item,
        bought: r.bought,
    }))?;
    Ok(vec![(CONCEPTS, concepts), (CATALOG, catalog), (USERS, users), (INTERACTIONS, interactions)])
}

/// Writes the dataset files and the manifest into `dir`, creating it.
pub fn write_dataset(dir: &Path, dataset: &Dataset, seed: u64, generator: &DataSection) -> CliResult<Manifest> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let mut files = Vec::new();
    for (name, bytes) in encode_files(dataset)? {
        let path = dir.join(name);
        fs::write(&path, &bytes).map_err(|e| CliError::io(&path, e))?;
        files.push(FileChecksum { name: name.to_string(), sha256: sha256_hex(&bytes) });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        seed,
        generator: generator.clone(),
        counts: Counts {
            concepts: dataset.concepts.len(),
            items: dataset.items.len(),
            users: dataset.users.len(),
            interactions: dataset.interactions.len(),
        },
        files,
    };
    let path = dir.join(MANIFEST);
    let f = fs::File::create(&path).map_err(|e| CliError::io(&path, e))?;
    let mut w = BufWriter::new(f);
    serde_json::to_writer_pretty(&mut w, &manifest).map_err(|e| CliError::Format(e.to_string()))?;
    w.write_all(b"\n").map_err(|e| CliError::io(&path, e))?;
    w.flush().map_err(|e| CliError::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> CliResult<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
    let m: Manifest =
        serde_json::from_str(&text).map_err(|e| CliError::Format(format!("{}: {e}", path.display())))?;
    if m.format_version != FORMAT_VERSION {
        return Err(CliError::Format(format!("unsupported dataset format version {}", m.format_version)));
    }
    Ok(m)
}

/// Parses one JSON record per line. Errors name the file and 1-based line.
fn parse_lines<T: DeserializeOwned>(path: &Path) -> CliResult<Vec<T>> {
    let f = fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| CliError::io(path, e))?;
        let rec = serde_json::from_str(&line)
            .map_err(|e| CliError::Format(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

fn decode_b64(path: &Path, line: usize, s: &str) -> CliResult<Vec<u8>> {
    B64.decode(s)
        .map_err(|e| CliError::Format(format!("{}:{line}: bad base64: {e}", path.display())))
}

/// Reads a dataset without checking checksums.
pub fn read_dataset_unverified(dir: &Path) -> CliResult<Dataset> {
    let p = dir.join(CONCEPTS);
    let concepts = parse_lines::<ConceptLine>(&p)?
        .into_iter()
        .enumerate()
        .map(|(i, c)| {
            Ok(LatentConcept {
                id: c.id,
                latent: c.latent,
                text_signature: c.text_signature,
                image_template: decode_b64(&p, i + 1, &c.image_template)?,
            })
        })
        .collect::<CliResult<_>>()?;
    let p = dir.join(CATALOG);
    let items = parse_lines::<ItemLine>(&p)?
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            let pixels = decode_b64(&p, i + 1, &r.pixels)?;
            let image = Image::new(r.height, r.width, r.channels, pixels)
                .map_err(|e| CliError::Format(format!("{}:{}: {e}", p.display(), i + 1)))?;
            Ok(ItemRecord {
                id: r.id,
                concept: r.concept,
                text: r.text,
                image,
                text_corrupted: r.text_corrupted,
                image_corrupted: r.image_corrupted,
            })
        })
        .collect::<CliResult<_>>()?;
    let users = parse_lines::<UserLine>(&dir.join(USERS))?
        .into_iter()
        .map(|u| UserRecord { id: u.id, preference: u.preference })
        .collect();
    let interactions = parse_lines::<InteractionLine>(&dir.join(INTERACTIONS))?
        .into_iter()
        .map(|r| InteractionRecord { user: r.user, timestamp: r.timestamp, item: r.item, bought: r.bought })
        .collect();
    Ok(Dataset { concepts, items, users, interactions })
}

/// Reads a dataset after checking every file against the manifest.
pub fn read_dataset(dir: &Path) -> CliResult<(Manifest, Dataset)> {
    let manifest = read_manifest(dir)?;
    for f in &manifest.files {
        let path = dir.join(&f.name);
        let bytes = fs::read(&path).map_err(|e| CliError::io(&path, e))?;
        if sha256_hex(&bytes) != f.sha256 {
            return Err(CliError::Data(format!("{}: checksum does not match the manifest", path.display())));
        }
    }
    let dataset = read_dataset_unverified(dir)?;
    Ok((manifest, dataset))
}
