//! Interaction and modality-feature loading, k-core filtering and splitting.
//!
//! Interactions are binary implicit feedback: duplicate `(user, item)` pairs
//! collapse to one before filtering. Splits are a global random 8:1:1 split
//! with a repair pass that moves one held-out pair back into train for any
//! user left without training data.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{RearmError, Result};

pub const FEATURE_MAGIC: &[u8; 4] = b"MMFT";
pub const FEATURE_VERSION: u32 = 1;

/// An interaction as it appears in the input file.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RawPair {
    pub user: String,
    pub item: String,
}

impl RawPair {
    pub fn new(user: impl Into<String>, item: impl Into<String>) -> Self {
        RawPair {
            user: user.into(),
            item: item.into(),
        }
    }
}

/// Bijection between external tokens and contiguous indices.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IdMap {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl IdMap {
    /// Builds a map over the distinct tokens. Indices follow numeric order
    /// when every token is a non-negative integer, lexicographic otherwise.
    pub fn from_tokens<'a>(tokens: impl IntoIterator<Item = &'a str>) -> Self {
        let mut distinct: Vec<String> = tokens
            .into_iter()
            .collect::<HashSet<_>>()
            .into_iter()
            .map(str::to_owned)
            .collect();
        let numeric = distinct.iter().all(|t| t.parse::<u64>().is_ok());
        if numeric {
            distinct.sort_by_key(|t| t.parse::<u64>().unwrap_or(u64::MAX));
        } else {
            distinct.sort();
        }
        let index = distinct
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        IdMap {
            tokens: distinct,
            index,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, index: usize) -> Option<&str> {
        self.tokens.get(index).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// JSON object `{token: index}`.
    pub fn to_json(&self) -> String {
        let ordered: BTreeMap<&str, usize> = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.as_str(), i))
            .collect();
        serde_json::to_string_pretty(&ordered).expect("id map serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let parsed: BTreeMap<String, usize> = serde_json::from_str(text)
            .map_err(|e| RearmError::Data(format!("id map json: {e}")))?;
        let mut tokens = vec![None; parsed.len()];
        for (tok, idx) in parsed {
            match tokens.get_mut(idx) {
                Some(slot @ None) => *slot = Some(tok),
                _ => {
                    return Err(RearmError::Data(format!(
                        "id map is not a bijection onto 0..n (index {idx})"
                    )))
                }
            }
        }
        let tokens: Vec<String> = tokens.into_iter().map(|t| t.unwrap_or_default()).collect();
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Ok(IdMap { tokens, index })
    }
}

/// Train/validation/test ratios.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: u32,
    pub val: u32,
    pub test: u32,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 8,
            val: 1,
            test: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone)]
pub struct InteractionDataset {
    pub n_users: usize,
    pub n_items: usize,
    pub train: Vec<(usize, usize)>,
    pub val: Vec<(usize, usize)>,
    pub test: Vec<(usize, usize)>,
    pub user_id_map: IdMap,
    pub item_id_map: IdMap,
    /// Per-user sorted train item lists.
    pub train_adjacency: Vec<Vec<usize>>,
}

impl InteractionDataset {
    /// Builds a dataset from already-indexed splits. Used by generators and
    /// tests; id maps are the identity on decimal tokens.
    pub fn from_indexed(
        n_users: usize,
        n_items: usize,
        mut train: Vec<(usize, usize)>,
        mut val: Vec<(usize, usize)>,
        mut test: Vec<(usize, usize)>,
    ) -> Result<Self> {
        for split in [&mut train, &mut val, &mut test] {
            split.sort_unstable();
            split.dedup();
        }
        let user_tokens: Vec<String> = (0..n_users).map(|u| u.to_string()).collect();
        let item_tokens: Vec<String> = (0..n_items).map(|i| i.to_string()).collect();
        let ds = InteractionDataset {
            n_users,
            n_items,
            train_adjacency: adjacency(n_users, &train),
            train,
            val,
            test,
            user_id_map: IdMap::from_tokens(user_tokens.iter().map(String::as_str)),
            item_id_map: IdMap::from_tokens(item_tokens.iter().map(String::as_str)),
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn split(&self, split: Split) -> &[(usize, usize)] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    /// Per-user sorted item lists for one split.
    pub fn split_adjacency(&self, split: Split) -> Vec<Vec<usize>> {
        adjacency(self.n_users, self.split(split))
    }

    /// Per-item sorted train user lists.
    pub fn train_item_adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.n_items];
        for &(u, i) in &self.train {
            adj[i].push(u);
        }
        for row in &mut adj {
            row.sort_unstable();
        }
        adj
    }

    /// Checks index bounds, split disjointness and train coverage.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for split in [Split::Train, Split::Val, Split::Test] {
            for &(u, i) in self.split(split) {
                if u >= self.n_users || i >= self.n_items {
                    return Err(RearmError::Data(format!(
                        "pair ({u},{i}) out of range in {} split",
                        split.as_str()
                    )));
                }
                if !seen.insert((u, i)) {
                    return Err(RearmError::Data(format!(
                        "pair ({u},{i}) duplicated across or within splits"
                    )));
                }
            }
        }
        if let Some(u) = self.train_adjacency.iter().position(Vec::is_empty) {
            return Err(RearmError::Data(format!("user {u} has no train interaction")));
        }
        Ok(())
    }

    /// SHA-256 over sizes and all three splits; identifies the dataset a
    /// checkpoint was trained on.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.n_users as u64).to_le_bytes());
        h.update((self.n_items as u64).to_le_bytes());
        for split in [Split::Train, Split::Val, Split::Test] {
            h.update(split.as_str().as_bytes());
            for &(u, i) in self.split(split) {
                h.update((u as u64).to_le_bytes());
                h.update((i as u64).to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

fn adjacency(n_users: usize, pairs: &[(usize, usize)]) -> Vec<Vec<usize>> {
    let mut adj = vec![Vec::new(); n_users];
    for &(u, i) in pairs {
        adj[u].push(i);
    }
    for row in &mut adj {
        row.sort_unstable();
    }
    adj
}

/// Reads a `user<TAB>item[<TAB>...]` file. Blank lines and `#` comments are
/// skipped; duplicates are kept.
pub fn load_interactions(path: &Path) -> Result<Vec<RawPair>> {
    let text = fs::read_to_string(path).map_err(|e| RearmError::io(path, e))?;
    parse_interactions(&text, path)
}

pub(crate) fn parse_interactions(text: &str, path: &Path) -> Result<Vec<RawPair>> {
    let mut pairs = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let mut cols = line.split('\t');
        let user = cols.next().unwrap_or("").trim();
        let item = cols.next().map(str::trim);
        match item {
            Some(item) if !user.is_empty() && !item.is_empty() => {
                pairs.push(RawPair::new(user, item));
            }
            _ => {
                return Err(RearmError::Parse {
                    path: path.to_path_buf(),
                    line: lineno + 1,
                    msg: format!("expected 'user<TAB>item', got {line:?}"),
                })
            }
        }
    }
    if pairs.is_empty() {
        return Err(RearmError::Data(format!(
            "{} contains no interactions",
            path.display()
        )));
    }
    Ok(pairs)
}

/// Removes duplicates (keeping first occurrence order), then iteratively
/// drops users and items with fewer than `k` interactions until fixpoint.
pub fn apply_k_core(pairs: &[RawPair], k: usize) -> Result<Vec<RawPair>> {
    if k == 0 {
        return Err(RearmError::Config("k-core threshold must be >= 1".into()));
    }
    let mut seen = HashSet::new();
    let mut current: Vec<RawPair> = pairs
        .iter()
        .filter(|p| seen.insert((p.user.as_str(), p.item.as_str())))
        .cloned()
        .collect();
    loop {
        let mut user_deg: HashMap<&str, usize> = HashMap::new();
        let mut item_deg: HashMap<&str, usize> = HashMap::new();
        for p in &current {
            *user_deg.entry(p.user.as_str()).or_default() += 1;
            *item_deg.entry(p.item.as_str()).or_default() += 1;
        }
        let keep: Vec<bool> = current
            .iter()
            .map(|p| user_deg[p.user.as_str()] >= k && item_deg[p.item.as_str()] >= k)
            .collect();
        if keep.iter().all(|&b| b) {
            break;
        }
        let mut it = keep.into_iter();
        current.retain(|_| it.next().unwrap_or(false));
    }
    if current.is_empty() {
        return Err(RearmError::Data("dataset eliminated by k-core".into()));
    }
    Ok(current)
}

/// Global random split. Deterministic for a fixed seed.
pub fn split_dataset(pairs: &[RawPair], ratios: SplitRatios, seed: u64) -> Result<InteractionDataset> {
    let total_ratio = ratios.train + ratios.val + ratios.test;
    if total_ratio == 0 {
        return Err(RearmError::Config("split ratios sum to zero".into()));
    }
    let mut seen = HashSet::new();
    let pairs: Vec<&RawPair> = pairs
        .iter()
        .filter(|p| seen.insert((p.user.as_str(), p.item.as_str())))
        .collect();
    if pairs.len() < 3 {
        return Err(RearmError::Data(format!(
            "need at least 3 interactions to split, got {}",
            pairs.len()
        )));
    }
    let user_id_map = IdMap::from_tokens(pairs.iter().map(|p| p.user.as_str()));
    let item_id_map = IdMap::from_tokens(pairs.iter().map(|p| p.item.as_str()));
    let mut indexed: Vec<(usize, usize)> = pairs
        .iter()
        .map(|p| {
            (
                user_id_map.get(&p.user).expect("mapped"),
                item_id_map.get(&p.item).expect("mapped"),
            )
        })
        .collect();
    // Shuffle from a canonical order so input file order does not matter.
    indexed.sort_unstable();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    indexed.shuffle(&mut rng);

    let n = indexed.len();
    let n_val = ((n as u64 * ratios.val as u64) as f64 / total_ratio as f64).round() as usize;
    let n_test = ((n as u64 * ratios.test as u64) as f64 / total_ratio as f64).round() as usize;
    let n_train = n - n_val - n_test;

    let mut train: Vec<(usize, usize)> = indexed[..n_train].to_vec();
    let mut val: Vec<(usize, usize)> = indexed[n_train..n_train + n_val].to_vec();
    let mut test: Vec<(usize, usize)> = indexed[n_train + n_val..].to_vec();

    let n_users = user_id_map.len();
    let mut has_train = vec![false; n_users];
    for &(u, _) in &train {
        has_train[u] = true;
    }
    // Repair: pull the first held-out pair (in shuffled order) of any user
    // without train data back into train, preferring val over test.
    for held in [&mut val, &mut test] {
        let mut moved = Vec::new();
        held.retain(|&(u, i)| {
            if has_train[u] {
                true
            } else {
                has_train[u] = true;
                moved.push((u, i));
                false
            }
        });
        train.extend(moved);
    }

    InteractionDataset::from_parts(user_id_map, item_id_map, train, val, test)
}

impl InteractionDataset {
    fn from_parts(
        user_id_map: IdMap,
        item_id_map: IdMap,
        mut train: Vec<(usize, usize)>,
        mut val: Vec<(usize, usize)>,
        mut test: Vec<(usize, usize)>,
    ) -> Result<Self> {
        train.sort_unstable();
        val.sort_unstable();
        test.sort_unstable();
        let n_users = user_id_map.len();
        let ds = InteractionDataset {
            n_users,
            n_items: item_id_map.len(),
            train_adjacency: adjacency(n_users, &train),
            train,
            val,
            test,
            user_id_map,
            item_id_map,
        };
        ds.validate()?;
        Ok(ds)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Visual,
    Textual,
}

impl Modality {
    pub const ALL: [Modality; 2] = [Modality::Visual, Modality::Textual];

    pub fn as_str(&self) -> &'static str {
        match self {
            Modality::Visual => "visual",
            Modality::Textual => "textual",
        }
    }
}

/// Item features for one modality and the derived user preference matrix.
#[derive(Debug, Clone)]
pub struct ModalFeatures {
    pub modality: Modality,
    pub item_matrix: Array2<f64>,
    pub user_matrix: Array2<f64>,
}

impl ModalFeatures {
    pub fn new(modality: Modality, ds: &InteractionDataset, item_matrix: Array2<f64>) -> Result<Self> {
        if item_matrix.nrows() != ds.n_items {
            return Err(RearmError::Data(format!(
                "{} features have {} rows, dataset has {} items",
                modality.as_str(),
                item_matrix.nrows(),
                ds.n_items
            )));
        }
        check_finite(&item_matrix, modality.as_str())?;
        let user_matrix = derive_user_features(ds, &item_matrix);
        Ok(ModalFeatures {
            modality,
            item_matrix,
            user_matrix,
        })
    }

    pub fn dim(&self) -> usize {
        self.item_matrix.ncols()
    }
}

fn check_finite(m: &Array2<f64>, what: &str) -> Result<()> {
    if let Some(((r, c), v)) = m.indexed_iter().find(|(_, v)| !v.is_finite()) {
        return Err(RearmError::Data(format!(
            "{what} feature entry ({r},{c}) is {v}"
        )));
    }
    Ok(())
}

/// Row `u` is the mean of the item rows in `u`'s train set.
pub fn derive_user_features(ds: &InteractionDataset, items: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::<f64>::zeros((ds.n_users, items.ncols()));
    for (u, its) in ds.train_adjacency.iter().enumerate() {
        if its.is_empty() {
            continue;
        }
        let mut row = out.row_mut(u);
        for &i in its {
            row += &items.row(i);
        }
        row /= its.len() as f64;
    }
    out
}

/// Reads a feature matrix (binary `MMFT` or whitespace text) and checks the
/// row count.
pub fn load_feature_matrix(path: &Path, expected_rows: usize) -> Result<Array2<f64>> {
    let m = read_feature_matrix(path)?;
    if m.nrows() != expected_rows {
        return Err(RearmError::format(
            path,
            format!("expected {expected_rows} rows, found {}", m.nrows()),
        ));
    }
    Ok(m)
}

/// Reads a feature matrix without a row-count check.
pub fn read_feature_matrix(path: &Path) -> Result<Array2<f64>> {
    let bytes = fs::read(path).map_err(|e| RearmError::io(path, e))?;
    let m = if bytes.starts_with(FEATURE_MAGIC) {
        decode_binary_features(&bytes, path)?
    } else {
        let text = String::from_utf8(bytes)
            .map_err(|_| RearmError::format(path, "neither MMFT binary nor UTF-8 text"))?;
        parse_text_features(&text, path)?
    };
    if let Some(((r, c), v)) = m.indexed_iter().find(|(_, v)| !v.is_finite()) {
        return Err(RearmError::format(path, format!("entry ({r},{c}) is {v}")));
    }
    Ok(m)
}

fn decode_binary_features(bytes: &[u8], path: &Path) -> Result<Array2<f64>> {
    const HEADER: usize = 4 + 4 + 8 + 8;
    if bytes.len() < HEADER {
        return Err(RearmError::format(path, "truncated header"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FEATURE_VERSION {
        return Err(RearmError::format(path, format!("unsupported version {version}")));
    }
    let rows = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let cols = u64::from_le_bytes(bytes[16..24].try_into().expect("8 bytes")) as usize;
    let n = rows
        .checked_mul(cols)
        .ok_or_else(|| RearmError::format(path, "rows*cols overflows"))?;
    let body = &bytes[HEADER..];
    if body.len() != n * 4 {
        return Err(RearmError::format(
            path,
            format!("expected {} payload bytes, found {}", n * 4, body.len()),
        ));
    }
    let data: Vec<f64> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Ok(Array2::from_shape_vec((rows, cols), data).expect("shape checked"))
}

fn parse_text_features(text: &str, path: &Path) -> Result<Array2<f64>> {
    let mut data = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let row: std::result::Result<Vec<f64>, _> =
            line.split_whitespace().map(str::parse::<f64>).collect();
        let row = row.map_err(|e| RearmError::Parse {
            path: path.to_path_buf(),
            line: lineno + 1,
            msg: e.to_string(),
        })?;
        match cols {
            None => cols = Some(row.len()),
            Some(c) if c != row.len() => {
                return Err(RearmError::Parse {
                    path: path.to_path_buf(),
                    line: lineno + 1,
                    msg: format!("expected {c} columns, found {}", row.len()),
                })
            }
            _ => {}
        }
        data.extend(row);
        rows += 1;
    }
    let cols = cols.ok_or_else(|| RearmError::format(path, "empty feature file"))?;
    Ok(Array2::from_shape_vec((rows, cols), data).expect("rows are uniform"))
}

/// Writes the binary `MMFT` format (values narrowed to f32).
pub fn write_feature_matrix(path: &Path, m: &Array2<f64>) -> Result<()> {
    let mut buf = Vec::with_capacity(24 + m.len() * 4);
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(m.nrows() as u64).to_le_bytes());
    buf.extend_from_slice(&(m.ncols() as u64).to_le_bytes());
    for v in m.iter() {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(|e| RearmError::io(path, e))?;
    f.write_all(&buf).map_err(|e| RearmError::io(path, e))
}

/// Selects feature rows for the dataset's items when item tokens are
/// integer row indices into a catalog-wide feature file.
pub fn align_features_by_token(catalog: &Array2<f64>, items: &IdMap) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((items.len(), catalog.ncols()));
    for (idx, tok) in items.tokens().iter().enumerate() {
        let row: usize = tok.parse().map_err(|_| {
            RearmError::Data(format!(
                "item token {tok:?} is not an integer row index into the feature file"
            ))
        })?;
        if row >= catalog.nrows() {
            return Err(RearmError::Data(format!(
                "item token {row} beyond feature file rows ({})",
                catalog.nrows()
            )));
        }
        out.row_mut(idx).assign(&catalog.row(row));
    }
    Ok(out)
}
