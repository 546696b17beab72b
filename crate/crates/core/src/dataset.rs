//! Interaction ingestion, sparse-entity filtering, timeline slicing and the
//! prepared-dataset directory format.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};

pub const FORMAT_VERSION: u32 = 1;

/// One `(user, item, timestamp)` line of the input file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawInteraction {
    pub user_id: String,
    pub item_id: String,
    pub timestamp: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Interaction {
    pub user: u32,
    pub item: u32,
    pub timestamp: i64,
}

/// Filtered interactions with dense indices, sorted by timestamp.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionLog {
    pub interactions: Vec<Interaction>,
    pub num_users: usize,
    pub num_items: usize,
    /// Original identifiers, indexed by dense id.
    pub user_ids: Vec<String>,
    pub item_ids: Vec<String>,
}

/// An [`InteractionLog`] segmented into equal-length slices.
#[derive(Debug, Clone, PartialEq)]
pub struct SlicedLog {
    pub log: InteractionLog,
    pub slice_count: usize,
    pub slice_length: i64,
    pub t_min: i64,
    /// Slice index of each interaction, parallel to `log.interactions`.
    pub slice_of: Vec<u32>,
    bounds: Vec<Range<usize>>,
}

/// Train/validation/test assignment of slice indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SliceSplit {
    pub slice_count: usize,
}

impl SliceSplit {
    pub fn train_slices(&self) -> Range<usize> {
        0..self.slice_count - 2
    }

    pub fn valid_slice(&self) -> usize {
        self.slice_count - 2
    }

    pub fn test_slice(&self) -> usize {
        self.slice_count - 1
    }
}

/// Parses the tab-separated triplet format. `#` lines and blank lines are skipped.
pub fn parse_triplets(reader: impl Read) -> Result<Vec<RawInteraction>> {
    let mut out = Vec::new();
    for (n, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        let lineno = n + 1;
        let trimmed = line.trim_end_matches('\r');
        if trimmed.starts_with('#') || trimmed.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = trimmed.split('\t').collect();
        let err = |message: String| Error::Parse { line: lineno, message };
        if fields.len() != 3 {
            return Err(err(format!("expected 3 tab-separated fields, found {}", fields.len())));
        }
        if fields[0].is_empty() || fields[1].is_empty() {
            return Err(err("empty user or item id".into()));
        }
        let timestamp: i64 = fields[2].trim().parse().map_err(|e| err(format!("bad timestamp {:?}: {e}", fields[2])))?;
        if timestamp < 0 {
            return Err(err(format!("negative timestamp {timestamp}")));
        }
        out.push(RawInteraction { user_id: fields[0].to_string(), item_id: fields[1].to_string(), timestamp });
    }
    Ok(out)
}

/// Reads, filters and re-indexes an interaction file.
pub fn ingest(path: &Path, min_interactions: usize) -> Result<InteractionLog> {
    let raw = parse_triplets(fs::File::open(path)?)?;
    build_log(raw, min_interactions)
}

/// Drops users and items with fewer than `min_interactions` interactions,
/// repeating until no entity falls below the threshold, then assigns dense
/// ids in order of first appearance on the time-sorted log.
pub fn build_log(raw: Vec<RawInteraction>, min_interactions: usize) -> Result<InteractionLog> {
    if min_interactions == 0 {
        return Err(contract("min_interactions must be at least 1"));
    }
    if raw.is_empty() {
        return Err(Error::Empty("input has no interactions".into()));
    }
    let mut keep = vec![true; raw.len()];
    loop {
        let mut users: HashMap<&str, usize> = HashMap::new();
        let mut items: HashMap<&str, usize> = HashMap::new();
        for (r, _) in raw.iter().zip(&keep).filter(|(_, &k)| k) {
            *users.entry(&r.user_id).or_default() += 1;
            *items.entry(&r.item_id).or_default() += 1;
        }
        let mut changed = false;
        for (r, k) in raw.iter().zip(keep.iter_mut()) {
            if *k && (users[r.user_id.as_str()] < min_interactions || items[r.item_id.as_str()] < min_interactions) {
                *k = false;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    let mut kept: Vec<&RawInteraction> = raw.iter().zip(&keep).filter(|(_, &k)| k).map(|(r, _)| r).collect();
    if kept.is_empty() {
        return Err(Error::Empty(format!("nothing survives a minimum of {min_interactions} interactions")));
    }
    kept.sort_by_key(|r| r.timestamp);

    let mut user_index: HashMap<&str, u32> = HashMap::new();
    let mut item_index: HashMap<&str, u32> = HashMap::new();
    let mut user_ids = Vec::new();
    let mut item_ids = Vec::new();
    let mut interactions = Vec::with_capacity(kept.len());
    for r in kept {
        let user = *user_index.entry(&r.user_id).or_insert_with(|| {
            user_ids.push(r.user_id.clone());
            (user_ids.len() - 1) as u32
        });
        let item = *item_index.entry(&r.item_id).or_insert_with(|| {
            item_ids.push(r.item_id.clone());
            (item_ids.len() - 1) as u32
        });
        interactions.push(Interaction { user, item, timestamp: r.timestamp });
    }
    Ok(InteractionLog { interactions, num_users: user_ids.len(), num_items: item_ids.len(), user_ids, item_ids })
}

impl InteractionLog {
    /// Builds a log directly from dense-indexed interactions (used for
    /// synthetic data). Interactions are stably sorted by timestamp.
    pub fn from_indexed(mut interactions: Vec<Interaction>, num_users: usize, num_items: usize) -> Result<Self> {
        if interactions.is_empty() {
            return Err(Error::Empty("no interactions".into()));
        }
        if let Some(bad) = interactions.iter().find(|x| x.user as usize >= num_users || x.item as usize >= num_items) {
            return Err(contract(format!("interaction {bad:?} outside {num_users} users / {num_items} items")));
        }
        interactions.sort_by_key(|x| x.timestamp);
        Ok(Self {
            interactions,
            num_users,
            num_items,
            user_ids: (0..num_users).map(|u| format!("u{u}")).collect(),
            item_ids: (0..num_items).map(|i| format!("i{i}")).collect(),
        })
    }

    pub fn t_min(&self) -> i64 {
        self.interactions.iter().map(|x| x.timestamp).min().unwrap_or(0)
    }

    pub fn t_max(&self) -> i64 {
        self.interactions.iter().map(|x| x.timestamp).max().unwrap_or(0)
    }
}

/// Splits the span `[t_min, t_max]` into `slice_count` slices of length
/// `ceil((t_max − t_min + 1) / slice_count)`.
pub fn assign_slices(log: InteractionLog, slice_count: usize) -> Result<SlicedLog> {
    if slice_count < 3 {
        return Err(contract(format!("need at least 3 slices, got {slice_count}")));
    }
    if log.interactions.is_empty() {
        return Err(Error::Empty("cannot slice an empty log".into()));
    }
    let (t_min, t_max) = (log.t_min(), log.t_max());
    if t_min == t_max {
        return Err(Error::DegenerateSpan(t_min));
    }
    let span = t_max - t_min + 1;
    let slice_length = (span + slice_count as i64 - 1) / slice_count as i64;
    SlicedLog::new(log, slice_count, slice_length, t_min)
}

impl SlicedLog {
    /// Slices `log` with explicit geometry (as read back from a manifest).
    pub fn new(log: InteractionLog, slice_count: usize, slice_length: i64, t_min: i64) -> Result<Self> {
        if slice_length <= 0 {
            return Err(contract("slice length must be positive"));
        }
        if slice_count < 3 {
            return Err(contract(format!("need at least 3 slices, got {slice_count}")));
        }
        let mut slice_of = Vec::with_capacity(log.interactions.len());
        for x in &log.interactions {
            let s = (x.timestamp - t_min).div_euclid(slice_length);
            if s < 0 || s as usize >= slice_count {
                return Err(contract(format!("timestamp {} falls outside the {slice_count} slices", x.timestamp)));
            }
            slice_of.push(s as u32);
        }
        if slice_of.windows(2).any(|w| w[0] > w[1]) {
            return Err(contract("interactions are not sorted by time"));
        }
        let mut bounds = Vec::with_capacity(slice_count);
        let mut start = 0;
        for s in 0..slice_count as u32 {
            let end = start + slice_of[start..].iter().take_while(|&&x| x == s).count();
            bounds.push(start..end);
            start = end;
        }
        Ok(Self { log, slice_count, slice_length, t_min, slice_of, bounds })
    }

    pub fn num_users(&self) -> usize {
        self.log.num_users
    }

    pub fn num_items(&self) -> usize {
        self.log.num_items
    }

    /// Interactions falling in slice `s`, in time order.
    pub fn slice(&self, s: usize) -> &[Interaction] {
        &self.log.interactions[self.bounds[s].clone()]
    }

    pub fn slice_start(&self, s: usize) -> i64 {
        self.t_min + s as i64 * self.slice_length
    }

    pub fn split(&self) -> SliceSplit {
        split(self.slice_count).expect("slice_count >= 3 checked at construction")
    }
}

pub fn split(slice_count: usize) -> Result<SliceSplit> {
    if slice_count < 3 {
        return Err(contract(format!("need at least 3 slices, got {slice_count}")));
    }
    Ok(SliceSplit { slice_count })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub num_users: usize,
    pub num_items: usize,
    pub num_interactions: usize,
    pub slice_count: usize,
    pub slice_length: i64,
    pub t_min: i64,
    pub t_max: i64,
    pub min_interactions: usize,
}

fn encode_interactions(log: &InteractionLog) -> Vec<u8> {
    let mut out = Vec::with_capacity(log.interactions.len() * 16);
    for x in &log.interactions {
        out.extend_from_slice(&x.user.to_le_bytes());
        out.extend_from_slice(&x.item.to_le_bytes());
        out.extend_from_slice(&x.timestamp.to_le_bytes());
    }
    out
}

/// Writes `interactions.bin`, `manifest.json`, `users.txt` and `items.txt`.
pub fn save_prepared(dir: &Path, data: &SlicedLog, min_interactions: usize) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        num_users: data.num_users(),
        num_items: data.num_items(),
        num_interactions: data.log.interactions.len(),
        slice_count: data.slice_count,
        slice_length: data.slice_length,
        t_min: data.t_min,
        t_max: data.log.t_max(),
        min_interactions,
    };
    fs::write(dir.join("interactions.bin"), encode_interactions(&data.log))?;
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    fs::write(dir.join("manifest.json"), json)?;
    let mut users = fs::File::create(dir.join("users.txt"))?;
    for id in &data.log.user_ids {
        writeln!(users, "{id}")?;
    }
    let mut items = fs::File::create(dir.join("items.txt"))?;
    for id in &data.log.item_ids {
        writeln!(items, "{id}")?;
    }
    Ok(manifest)
}

pub fn load_prepared(dir: &Path) -> Result<(SlicedLog, Manifest)> {
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Format {
            path: dir.display().to_string(),
            message: format!("format version {} (expected {FORMAT_VERSION})", manifest.format_version),
        });
    }
    let path = dir.join("interactions.bin");
    let bytes = fs::read(&path)?;
    if bytes.len() != manifest.num_interactions * 16 {
        return Err(Error::Format {
            path: path.display().to_string(),
            message: format!("{} bytes for {} records", bytes.len(), manifest.num_interactions),
        });
    }
    let interactions = bytes
        .chunks_exact(16)
        .map(|c| Interaction {
            user: u32::from_le_bytes(c[0..4].try_into().unwrap()),
            item: u32::from_le_bytes(c[4..8].try_into().unwrap()),
            timestamp: i64::from_le_bytes(c[8..16].try_into().unwrap()),
        })
        .collect();
    let read_ids = |name: &str, n: usize, prefix: &str| -> Result<Vec<String>> {
        match fs::read_to_string(dir.join(name)) {
            Ok(s) => Ok(s.lines().map(str::to_string).collect()),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok((0..n).map(|i| format!("{prefix}{i}")).collect()),
            Err(e) => Err(e.into()),
        }
    };
    let log = InteractionLog {
        interactions,
        num_users: manifest.num_users,
        num_items: manifest.num_items,
        user_ids: read_ids("users.txt", manifest.num_users, "u")?,
        item_ids: read_ids("items.txt", manifest.num_items, "i")?,
    };
    if let Some(bad) = log.interactions.iter().find(|x| x.user as usize >= log.num_users || x.item as usize >= log.num_items)
    {
        return Err(Error::Format { path: path.display().to_string(), message: format!("record {bad:?} out of range") });
    }
    let sliced = SlicedLog::new(log, manifest.slice_count, manifest.slice_length, manifest.t_min)?;
    Ok((sliced, manifest))
}
