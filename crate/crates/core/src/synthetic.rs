//! Planted sparse dictionaries with known per-atom classes.
//!
//! Every token draws a sparse non-negative code over `m_true` unit atoms.
//! The base row is `sum_j c_j w^b_j G_j + noise` and the fine-tuned row uses
//! `w^f_j`; the class of atom `j` fixes `(w^b_j, w^f_j)`.

use std::collections::BTreeMap;
use std::path::Path;

use log::warn;
use ndarray::{Array2, Axis};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::crosscoder::CrossCoder;
use crate::store::{ActivationShard, DType, ModelTag, ShardMeta, TokenText};
use crate::{Error, Real, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AtomClass {
    Shared,
    BaseOnly,
    FtOnly,
    Amplified,
    Minimized,
}

impl AtomClass {
    /// `(w^b, w^f)` for gain `g`.
    pub fn weights(self, gain: f64) -> (f64, f64) {
        match self {
            AtomClass::Shared => (1.0, 1.0),
            AtomClass::BaseOnly => (1.0, 0.0),
            AtomClass::FtOnly => (0.0, 1.0),
            AtomClass::Amplified => (1.0, gain),
            AtomClass::Minimized => (gain, 1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtomSpec {
    pub class: AtomClass,
    pub category: String,
    pub firing_prob: f64,
}

/// How many atoms fire on a token.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FiringMode {
    /// Each atom fires independently with its own probability.
    Independent,
    /// Exactly this many distinct atoms fire, chosen uniformly.
    Exact(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedSpec {
    pub d: usize,
    pub atoms: Vec<AtomSpec>,
    pub gain: f64,
    pub value_mean: f64,
    pub value_std: f64,
    pub value_floor: f64,
    pub noise_sigma: f64,
    pub firing: FiringMode,
    /// Tokens per synthetic sequence (for context windows).
    pub sequence_len: usize,
    pub layer_index: u16,
    pub seed: u64,
}

pub const CATEGORY_NAMES: [&str; 32] = [
    "biology", "chemistry", "physics", "medicine", "law", "history", "economics", "philosophy",
    "mathematics", "geography", "religion", "music", "sports", "cooking", "finance", "astronomy",
    "psychology", "politics", "literature", "engineering", "computing", "agriculture",
    "architecture", "linguistics", "ecology", "geology", "nutrition", "marketing", "security",
    "aviation", "fashion", "film",
];

/// Atom counts per class for [`PlantedSpec::balanced`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub shared: usize,
    pub base_only: usize,
    pub ft_only: usize,
    pub amplified: usize,
    pub minimized: usize,
}

impl Default for ClassCounts {
    /// 64 shared and 16 of every other class.
    fn default() -> Self {
        ClassCounts {
            shared: 64,
            base_only: 16,
            ft_only: 16,
            amplified: 16,
            minimized: 16,
        }
    }
}

impl ClassCounts {
    pub fn total(&self) -> usize {
        self.shared + self.base_only + self.ft_only + self.amplified + self.minimized
    }
}

impl PlantedSpec {
    /// Atoms are grouped `atoms_per_category` at a time into categories; a
    /// category only ever holds atoms of one class, so categories holding a
    /// non-shared class are exactly the affected ones.
    pub fn balanced(d: usize, counts: ClassCounts, atoms_per_category: usize, k_true: usize, seed: u64) -> Result<Self> {
        let m_true = counts.total();
        if m_true == 0 || atoms_per_category == 0 {
            return Err(Error::Param("need at least one atom and one atom per category".into()));
        }
        let order = [
            (AtomClass::BaseOnly, counts.base_only),
            (AtomClass::FtOnly, counts.ft_only),
            (AtomClass::Amplified, counts.amplified),
            (AtomClass::Minimized, counts.minimized),
            (AtomClass::Shared, counts.shared),
        ];
        let prob = (k_true as f64 / m_true as f64).clamp(f64::MIN_POSITIVE, 1.0);
        let mut atoms = Vec::with_capacity(m_true);
        let mut category = 0usize;
        for (class, count) in order {
            for i in 0..count {
                if i > 0 && i % atoms_per_category == 0 {
                    category += 1;
                }
                atoms.push(AtomSpec {
                    class,
                    category: category_name(category),
                    firing_prob: prob,
                });
            }
            if count > 0 {
                category += 1;
            }
        }
        let spec = PlantedSpec {
            d,
            atoms,
            gain: 3.0,
            value_mean: 1.0,
            value_std: 0.3,
            value_floor: 0.1,
            noise_sigma: 0.01,
            firing: FiringMode::Independent,
            sequence_len: 64,
            layer_index: 14,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// d=64 with 128 atoms: 64 shared and 16 of every other class, four atoms
    /// per category, about eight atoms firing per token.
    pub fn desk_default(seed: u64) -> Self {
        Self::balanced(64, ClassCounts::default(), 4, 8, seed).expect("default spec is valid")
    }

    pub fn m_true(&self) -> usize {
        self.atoms.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(Error::Param("d must be positive".into()));
        }
        if self.atoms.is_empty() {
            return Err(Error::Param("no atoms".into()));
        }
        if !(self.gain > 1.0) {
            return Err(Error::Param(format!("gain must exceed 1, got {}", self.gain)));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Param("noise sigma must be non-negative".into()));
        }
        if let Some(a) = self.atoms.iter().find(|a| !(a.firing_prob > 0.0 && a.firing_prob <= 1.0)) {
            return Err(Error::Param(format!("firing probability {} outside (0, 1]", a.firing_prob)));
        }
        if let FiringMode::Exact(k) = self.firing {
            if k == 0 || k > self.atoms.len() {
                return Err(Error::Param(format!("exact firing count {k} out of range")));
            }
        }
        if self.sequence_len == 0 {
            return Err(Error::Param("sequence_len must be positive".into()));
        }
        if self.m_true() > self.d * self.d {
            warn!(
                "m_true={} exceeds d^2={}; dictionary recovery is unlikely",
                self.m_true(),
                self.d * self.d
            );
        }
        Ok(())
    }

    pub fn corpus_ref(&self) -> String {
        format!("synthetic:{}", self.seed)
    }

    /// Planted unit directions, one row per atom.
    pub fn directions(&self) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut g = Array2::<f64>::zeros((self.m_true(), self.d));
        for mut row in g.rows_mut() {
            row.mapv_inplace(|_| StandardNormal.sample(&mut rng));
            let n = row.dot(&row).sqrt();
            row.mapv_inplace(|v| v / n);
        }
        g
    }
}

fn category_name(i: usize) -> String {
    if i < CATEGORY_NAMES.len() {
        CATEGORY_NAMES[i].to_string()
    } else {
        format!("{}{}", CATEGORY_NAMES[i % CATEGORY_NAMES.len()], i / CATEGORY_NAMES.len())
    }
}

/// One row of the ground-truth table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRow {
    pub atom_id: usize,
    pub class: AtomClass,
    pub category: String,
    pub w_base: f64,
    pub w_ft: f64,
    pub direction_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub atoms: Vec<TruthRow>,
    pub directions: Vec<Vec<f64>>,
}

impl GroundTruth {
    /// Category -> affected (holds any non-shared atom).
    pub fn gold_categories(&self) -> BTreeMap<String, bool> {
        let mut out = BTreeMap::new();
        for a in &self.atoms {
            let flag = out.entry(a.category.clone()).or_insert(false);
            *flag |= a.class != AtomClass::Shared;
        }
        out
    }

    pub fn atoms_of(&self, class: AtomClass) -> Vec<usize> {
        self.atoms.iter().filter(|a| a.class == class).map(|a| a.atom_id).collect()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("truth serializes");
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}

pub struct SyntheticData {
    pub base: ActivationShard,
    pub ft: ActivationShard,
    pub truth: GroundTruth,
    /// Planted code per token: `(atom, value)` pairs.
    pub codes: Vec<Vec<(usize, f64)>>,
}

struct Rows {
    base: Vec<f32>,
    ft: Vec<f32>,
    codes: Vec<Vec<(usize, f64)>>,
    texts: Vec<TokenText>,
}

/// Tokens `start..end`. Every token has its own ChaCha stream, so any
/// partition of the index space reproduces the serial result.
fn generate_range(spec: &PlantedSpec, dirs: &Array2<f64>, start: usize, end: usize) -> Rows {
    let d = spec.d;
    let weights: Vec<(f64, f64)> = spec.atoms.iter().map(|a| a.class.weights(spec.gain)).collect();
    let value = Normal::new(spec.value_mean, spec.value_std.max(0.0)).expect("finite normal");
    let mut out = Rows {
        base: Vec::with_capacity((end - start) * d),
        ft: Vec::with_capacity((end - start) * d),
        codes: Vec::with_capacity(end - start),
        texts: Vec::with_capacity(end - start),
    };
    let (mut xb, mut xf) = (vec![0f64; d], vec![0f64; d]);
    for t in start..end {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(t as u64 + 1);
        let code = draw_token(spec, &value, &mut rng);
        xb.iter_mut().for_each(|v| *v = 0.0);
        xf.iter_mut().for_each(|v| *v = 0.0);
        for &(j, c) in &code {
            let (wb, wf) = weights[j];
            for (k, g) in dirs.row(j).iter().enumerate() {
                xb[k] += c * wb * g;
                xf[k] += c * wf * g;
            }
        }
        for k in 0..d {
            let (nb, nf): (f64, f64) = (StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng));
            out.base.push((xb[k] + spec.noise_sigma * nb) as f32);
            out.ft.push((xf[k] + spec.noise_sigma * nf) as f32);
        }
        let dominant = code
            .iter()
            .fold(None::<(usize, f64)>, |best, &(j, c)| match best {
                Some((_, bc)) if bc >= c => best,
                _ => Some((j, c)),
            });
        let label = dominant.map_or("background", |(j, _)| spec.atoms[j].category.as_str());
        out.texts.push(TokenText {
            sequence_id: (t / spec.sequence_len) as u32,
            text: format!("{label} token #{t}"),
        });
        out.codes.push(code);
    }
    out
}

/// Draws the code of one token. Values are `|N(mean, std)|` floored at
/// `value_floor`.
fn draw_token(spec: &PlantedSpec, value: &Normal<f64>, rng: &mut ChaCha8Rng) -> Vec<(usize, f64)> {
    let draw = |rng: &mut ChaCha8Rng| value.sample(rng).abs().max(spec.value_floor);
    match spec.firing {
        FiringMode::Independent => spec
            .atoms
            .iter()
            .enumerate()
            .filter_map(|(j, a)| rng.random_bool(a.firing_prob).then_some(j))
            .collect::<Vec<_>>()
            .into_iter()
            .map(|j| (j, draw(rng)))
            .collect(),
        FiringMode::Exact(k) => {
            let mut idx = sample(rng, spec.atoms.len(), k).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|j| (j, draw(rng))).collect()
        }
    }
}

fn direction_hash(row: ndarray::ArrayView1<f64>) -> String {
    let mut h = Sha256::new();
    for v in row {
        h.update(v.to_le_bytes());
    }
    hex::encode(&h.finalize()[..8])
}

/// Paired shards plus the ground truth for `n_tokens` tokens.
pub fn generate(spec: &PlantedSpec, n_tokens: usize) -> Result<SyntheticData> {
    spec.validate()?;
    if n_tokens == 0 {
        return Err(Error::Param("n_tokens must be at least 1".into()));
    }
    let dirs = spec.directions();
    let rows = generate_range(spec, &dirs, 0, n_tokens);
    let meta = |tag| ShardMeta {
        model_tag: tag,
        layer_index: spec.layer_index,
        dtype: DType::F32,
        corpus_ref: spec.corpus_ref(),
    };
    let d = spec.d;
    let base = ActivationShard::from_rows(meta(ModelTag::Base), rows.base.chunks_exact(d), Some(rows.texts.clone()))?;
    let ft = ActivationShard::from_rows(meta(ModelTag::Finetuned), rows.ft.chunks_exact(d), Some(rows.texts))?;
    let truth = GroundTruth {
        atoms: spec
            .atoms
            .iter()
            .enumerate()
            .map(|(j, a)| {
                let (w_base, w_ft) = a.class.weights(spec.gain);
                TruthRow {
                    atom_id: j,
                    class: a.class,
                    category: a.category.clone(),
                    w_base,
                    w_ft,
                    direction_hash: direction_hash(dirs.row(j)),
                }
            })
            .collect(),
        directions: dirs.axis_iter(Axis(0)).map(|r| r.to_vec()).collect(),
    };
    Ok(SyntheticData {
        base,
        ft,
        truth,
        codes: rows.codes,
    })
}

/// Latent-to-atom assignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtomMatching {
    /// `(latent, atom, cosine)`, one entry per matched atom, sorted by atom.
    pub pairs: Vec<(usize, usize, f64)>,
    pub unmatched_atoms: Vec<usize>,
}

impl AtomMatching {
    pub fn latent_for(&self, atom: usize) -> Option<(usize, f64)> {
        self.pairs.iter().find(|p| p.1 == atom).map(|p| (p.0, p.2))
    }

    pub fn mean_cosine(&self) -> f64 {
        if self.pairs.is_empty() {
            return 0.0;
        }
        self.pairs.iter().map(|p| p.2).sum::<f64>() / self.pairs.len() as f64
    }
}

/// Greedy one-to-one max-cosine matching between stacked decoder rows
/// `[D^b_j ; D^f_j]` and planted atoms `[w^b G ; w^f G]`, the latter expressed
/// in the model's normalized units.
pub fn match_atoms<T: Real>(model: &CrossCoder<T>, truth: &GroundTruth) -> Result<AtomMatching> {
    let d = model.d();
    if truth.directions.iter().any(|r| r.len() != d) {
        return Err(Error::Shape(format!("planted atoms do not have dimension {d}")));
    }
    let (sb, sf) = model.norm.map_or((1.0, 1.0), |s| (s.scale_base, s.scale_ft));
    let targets: Vec<Vec<f64>> = truth
        .atoms
        .iter()
        .zip(&truth.directions)
        .map(|(a, g)| {
            let mut v: Vec<f64> = g.iter().map(|x| x * a.w_base / sb).collect();
            v.extend(g.iter().map(|x| x * a.w_ft / sf));
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter().map(|x| x / n).collect()
        })
        .collect();
    let p = &model.params;
    let latents: Vec<Vec<f64>> = (0..model.m())
        .map(|j| {
            let mut v: Vec<f64> = p.dec_base.row(j).iter().map(|x| x.to_f64_lossy()).collect();
            v.extend(p.dec_ft.row(j).iter().map(|x| x.to_f64_lossy()));
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 0.0 {
                v.iter().map(|x| x / n).collect()
            } else {
                v
            }
        })
        .collect();
    let mut scored: Vec<(f64, usize, usize)> = Vec::with_capacity(latents.len() * targets.len());
    for (j, l) in latents.iter().enumerate() {
        for (a, t) in targets.iter().enumerate() {
            scored.push((l.iter().zip(t).map(|(x, y)| x * y).sum(), j, a));
        }
    }
    scored.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    let mut latent_used = vec![false; latents.len()];
    let mut atom_used = vec![false; targets.len()];
    let mut pairs = Vec::new();
    for (cos, j, a) in scored {
        if !latent_used[j] && !atom_used[a] {
            latent_used[j] = true;
            atom_used[a] = true;
            pairs.push((j, a, cos));
        }
    }
    pairs.sort_by_key(|p| p.1);
    let unmatched_atoms = (0..targets.len()).filter(|&a| !atom_used[a]).collect();
    Ok(AtomMatching { pairs, unmatched_atoms })
}
