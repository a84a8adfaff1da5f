//! Two-block synthetic data: users and items split into blocks, users
//! interacting inside their block plus a little cross-block noise, and
//! modal features aligned with the blocks. Inside a block, items sit on a
//! ring and users favour a band around their own ring position.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{split_dataset, InteractionDataset, RawPair, SplitRatios};
use crate::error::{RearmError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub blocks: usize,
    /// Probability that a user interacts with a given in-block item.
    pub density: f64,
    /// Cross-block interactions as a fraction of in-block ones.
    pub noise: f64,
    /// When non-zero, items sit on a ring inside their block and a user only
    /// interacts with items within this circular distance of its own
    /// position.
    pub band: usize,
    pub modal_dims: [usize; 2],
    /// Standard deviation of per-item feature noise around the block centre.
    pub feature_noise: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_users: 200,
            n_items: 100,
            blocks: 2,
            density: 1.0,
            noise: 0.05,
            band: 10,
            modal_dims: [16, 12],
            feature_noise: 1.0,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub pairs: Vec<RawPair>,
    /// Rows indexed by item number (token `"{i}"`).
    pub features: [Array2<f64>; 2],
    pub user_block: Vec<usize>,
    pub item_block: Vec<usize>,
}

fn block_of(idx: usize, n: usize, blocks: usize) -> usize {
    idx * blocks / n
}

fn ring_distance(a: usize, b: usize, len: usize) -> usize {
    let d = a.abs_diff(b);
    d.min(len - d)
}

/// Box–Muller standard normal.
fn normal(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

pub fn generate(cfg: &SyntheticConfig) -> Result<SyntheticData> {
    if cfg.blocks < 2 || cfg.blocks > cfg.n_items || cfg.blocks > cfg.n_users {
        return Err(RearmError::Config(format!("{} blocks for {} users / {} items", cfg.blocks, cfg.n_users, cfg.n_items)));
    }
    if !(0.0..=1.0).contains(&cfg.density) || !(0.0..=1.0).contains(&cfg.noise) {
        return Err(RearmError::Config("density and noise must lie in [0,1]".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let user_block: Vec<usize> = (0..cfg.n_users).map(|u| block_of(u, cfg.n_users, cfg.blocks)).collect();
    let item_block: Vec<usize> = (0..cfg.n_items).map(|i| block_of(i, cfg.n_items, cfg.blocks)).collect();

    let block_len = cfg.n_items.div_ceil(cfg.blocks);
    let ring_pos = |i: usize| i - item_block[i] * cfg.n_items / cfg.blocks;
    let mut pairs = Vec::new();
    for (u, &b) in user_block.iter().enumerate() {
        let centre = rng.random_range(0..block_len);
        let near = |i: usize| cfg.band == 0 || ring_distance(ring_pos(i), centre, block_len) <= cfg.band;
        let (inside, outside): (Vec<usize>, Vec<usize>) = (0..cfg.n_items).partition(|&i| item_block[i] == b);
        let inside: Vec<usize> = inside.into_iter().filter(|&i| near(i)).collect();
        let chosen: Vec<usize> = inside.into_iter().filter(|_| rng.random_bool(cfg.density)).collect();
        let n_noise = (chosen.len() as f64 * cfg.noise).round() as usize;
        let mut noise = Vec::new();
        while noise.len() < n_noise.min(outside.len()) {
            let i = outside[rng.random_range(0..outside.len())];
            if !noise.contains(&i) {
                noise.push(i);
            }
        }
        for i in chosen.into_iter().chain(noise) {
            pairs.push(RawPair::new(u.to_string(), i.to_string()));
        }
    }

    let features = cfg.modal_dims.map(|dm| {
        let centres = Array2::from_shape_simple_fn((cfg.blocks, dm), || normal(&mut rng));
        let ring = Array2::from_shape_simple_fn((2, dm), || normal(&mut rng));
        Array2::from_shape_fn((cfg.n_items, dm), |(i, c)| {
            let mut x = centres[[item_block[i], c]] + cfg.feature_noise * normal(&mut rng);
            if cfg.band > 0 {
                let angle = std::f64::consts::TAU * ring_pos(i) as f64 / block_len as f64;
                x += angle.cos() * ring[[0, c]] + angle.sin() * ring[[1, c]];
            }
            x
        })
    });
    Ok(SyntheticData {
        pairs,
        features,
        user_block,
        item_block,
    })
}

impl SyntheticData {
    /// 8:1:1 split of the generated pairs.
    pub fn split(&self, seed: u64) -> Result<InteractionDataset> {
        split_dataset(&self.pairs, SplitRatios::default(), seed)
    }

    /// Feature rows reordered to the dataset's item indices.
    pub fn aligned_features(&self, ds: &InteractionDataset) -> Result<[Array2<f64>; 2]> {
        let a = crate::dataset::align_features_by_token(&self.features[0], &ds.item_id_map)?;
        let b = crate::dataset::align_features_by_token(&self.features[1], &ds.item_id_map)?;
        Ok([a, b])
    }

    /// Writes `interactions.tsv`, `visual.txt` and `textual.txt` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| RearmError::io(dir, e))?;
        let mut tsv = String::new();
        for p in &self.pairs {
            let _ = writeln!(tsv, "{}\t{}", p.user, p.item);
        }
        let path = dir.join("interactions.tsv");
        fs::write(&path, tsv).map_err(|e| RearmError::io(&path, e))?;
        for (name, m) in ["visual.txt", "textual.txt"].iter().zip(&self.features) {
            let mut text = String::new();
            for row in m.rows() {
                let cells: Vec<String> = row.iter().map(|x| format!("{x:.6}")).collect();
                let _ = writeln!(text, "{}", cells.join(" "));
            }
            let path = dir.join(name);
            fs::write(&path, text).map_err(|e| RearmError::io(&path, e))?;
        }
        Ok(())
    }
}
