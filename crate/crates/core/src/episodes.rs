//! Feature datasets and N-way K-shot episode sampling.
//!
//! Features come either from [`synth_dataset`] (unit-norm class centres with
//! isotropic Gaussian noise) or from a text feature file read by
//! [`load_features`]: one sample per line, `class_id,v0,v1,...`, with `#`
//! comment lines ignored.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{cosine, norm, Matrix};

/// Rejection-sampling budget for class centres.
pub const MAX_CENTER_ATTEMPTS: usize = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Base,
    Validation,
    Novel,
}

/// Whether unlabeled query features may inform adaptation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Transductive,
    Inductive,
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "transductive" => Ok(Mode::Transductive),
            "inductive" => Ok(Mode::Inductive),
            other => Err(Error::Config(format!("unknown mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassSamples {
    pub id: u32,
    /// One sample per row.
    pub samples: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDataset {
    dim: usize,
    pub split: Split,
    classes: Vec<ClassSamples>,
}

impl FeatureDataset {
    pub fn new(split: Split, classes: Vec<ClassSamples>) -> Result<Self> {
        let dim = classes.first().map_or(0, |c| c.samples.cols());
        let mut seen = std::collections::BTreeSet::new();
        for c in &classes {
            if c.samples.cols() != dim {
                return Err(Error::Dimension {
                    op: "FeatureDataset::new",
                    detail: format!("class {} has dimension {}, expected {dim}", c.id, c.samples.cols()),
                });
            }
            if !seen.insert(c.id) {
                return Err(Error::Config(format!("duplicate class id {}", c.id)));
            }
        }
        Ok(Self { dim, split, classes })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> &[ClassSamples] {
        &self.classes
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn class_ids(&self) -> Vec<u32> {
        self.classes.iter().map(|c| c.id).collect()
    }

    pub fn num_samples(&self) -> usize {
        self.classes.iter().map(|c| c.samples.rows()).sum()
    }

    /// Splits off the classes after the first `count`; the tail gets `tail_split`.
    pub fn partition(mut self, count: usize, tail_split: Split) -> Result<(Self, Self)> {
        if count > self.classes.len() {
            return Err(Error::Capacity(format!(
                "cannot keep {count} of {} classes",
                self.classes.len()
            )));
        }
        let tail = self.classes.split_off(count);
        let tail = FeatureDataset { dim: self.dim, split: tail_split, classes: tail };
        Ok((self, tail))
    }

    /// Serialises to the feature-file format. `f64` display is shortest
    /// round-trip, so reading the text back is exact.
    pub fn to_feature_text(&self) -> String {
        let mut out = String::new();
        for c in &self.classes {
            for row in c.samples.iter_rows() {
                write!(out, "{}", c.id).unwrap();
                for v in row {
                    write!(out, ",{v}").unwrap();
                }
                out.push('\n');
            }
        }
        out
    }
}

/// Parameters of the synthetic Gaussian-cluster generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub dim: usize,
    pub samples_per_class: usize,
    pub noise_sigma: f64,
    pub min_center_angle_deg: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_classes: 30,
            dim: 16,
            samples_per_class: 100,
            noise_sigma: 0.35,
            min_center_angle_deg: 25.0,
            seed: 0,
        }
    }
}

/// Draws class centres on the unit sphere with a minimum pairwise angle, then
/// `samples_per_class` noisy samples around each. Class ids are `0..num_classes`.
///
/// A zero `noise_sigma` yields samples exactly at the centres.
pub fn synth_dataset(cfg: &SynthConfig) -> Result<FeatureDataset> {
    if cfg.num_classes < 2 {
        return Err(Error::Config("synth needs at least 2 classes".into()));
    }
    if cfg.dim < 2 {
        return Err(Error::Config("synth needs dimension >= 2".into()));
    }
    if !(cfg.noise_sigma >= 0.0 && cfg.noise_sigma.is_finite()) {
        return Err(Error::Config("noise sigma must be finite and non-negative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let min_cos = cfg.min_center_angle_deg.to_radians().cos();
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(cfg.num_classes);
    let mut attempts = 0usize;
    while centers.len() < cfg.num_classes {
        attempts += 1;
        if attempts > MAX_CENTER_ATTEMPTS {
            return Err(Error::InfeasibleGeometry(format!(
                "placed {} of {} centres {}° apart in {} dimensions",
                centers.len(),
                cfg.num_classes,
                cfg.min_center_angle_deg,
                cfg.dim
            )));
        }
        let mut c: Vec<f64> = (0..cfg.dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = norm(&c);
        if n == 0.0 {
            continue;
        }
        c.iter_mut().for_each(|v| *v /= n);
        // cos(angle) <= cos(min angle) <=> angle >= min angle
        if centers.iter().all(|o| cosine(o, &c).unwrap_or(1.0) <= min_cos) {
            centers.push(c);
        }
    }
    let classes = centers
        .iter()
        .enumerate()
        .map(|(id, center)| {
            let mut data = Vec::with_capacity(cfg.samples_per_class * cfg.dim);
            for _ in 0..cfg.samples_per_class {
                for &c in center {
                    let z: f64 = rng.sample(StandardNormal);
                    data.push(c + cfg.noise_sigma * z);
                }
            }
            ClassSamples {
                id: id as u32,
                samples: Matrix::new(cfg.samples_per_class, cfg.dim, data).expect("sized"),
            }
        })
        .collect();
    FeatureDataset::new(Split::Base, classes)
}

/// Class centres that [`synth_dataset`] would draw for `cfg`.
pub fn synth_centers(cfg: &SynthConfig) -> Result<Vec<Vec<f64>>> {
    let noiseless = SynthConfig {
        noise_sigma: 0.0,
        samples_per_class: 1,
        ..cfg.clone()
    };
    // Noise draws come after all centres, so the centres do not depend on
    // samples_per_class or noise_sigma.
    Ok(synth_dataset(&noiseless)?
        .classes
        .into_iter()
        .map(|c| c.samples.row(0).to_vec())
        .collect())
}

pub fn parse_features(text: &str, split: Split) -> Result<FeatureDataset> {
    let mut by_class: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    let mut dim: Option<usize> = None;
    let mut last_line = 0;
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        last_line = line_no;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = line.split(',');
        let id_field = fields.next().unwrap_or("").trim();
        let id: u32 = id_field.parse().map_err(|_| Error::Parse {
            line: line_no,
            msg: format!("bad class id `{id_field}`"),
        })?;
        let values = fields
            .map(|f| {
                let f = f.trim();
                f.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::Parse { line: line_no, msg: format!("bad value `{f}`") })
            })
            .collect::<Result<Vec<f64>>>()?;
        if values.is_empty() {
            return Err(Error::Parse { line: line_no, msg: "no feature values".into() });
        }
        match dim {
            None => dim = Some(values.len()),
            Some(d) if d != values.len() => {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("expected {d} values, found {}", values.len()),
                })
            }
            Some(_) => {}
        }
        by_class.entry(id).or_default().extend(values);
    }
    let Some(dim) = dim else {
        return Err(Error::Parse { line: last_line, msg: "no samples".into() });
    };
    let classes = by_class
        .into_iter()
        .map(|(id, data)| ClassSamples {
            id,
            samples: Matrix::new(data.len() / dim, dim, data).expect("validated widths"),
        })
        .collect();
    FeatureDataset::new(split, classes)
}

pub fn load_features(path: impl AsRef<Path>, split: Split) -> Result<FeatureDataset> {
    parse_features(&fs::read_to_string(path)?, split)
}

pub fn save_features(ds: &FeatureDataset, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, ds.to_feature_text())?;
    Ok(())
}

/// Where a sampled item came from in its dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SampleRef {
    pub class_index: usize,
    pub sample: usize,
}

/// One N-way K-shot task. Support and query rows are grouped by episode
/// class (`0..n_way`), K (respectively M) consecutive rows per class.
#[derive(Debug, Clone)]
pub struct Episode {
    n_way: usize,
    k_shot: usize,
    m_query: usize,
    pub mode: Mode,
    class_ids: Vec<u32>,
    support: Matrix,
    support_labels: Vec<usize>,
    query: Matrix,
    query_labels: Vec<usize>,
    support_refs: Vec<SampleRef>,
    query_refs: Vec<SampleRef>,
}

impl Episode {
    /// Builds an episode from explicit features. Every class `0..n_way` must
    /// occur exactly `k_shot` times in the support set and equally often in
    /// the query set.
    pub fn from_parts(
        n_way: usize,
        support: Matrix,
        support_labels: Vec<usize>,
        query: Matrix,
        query_labels: Vec<usize>,
        mode: Mode,
    ) -> Result<Self> {
        if n_way == 0 {
            return Err(Error::Capacity("episode needs at least one class".into()));
        }
        if support.rows() != support_labels.len() || query.rows() != query_labels.len() {
            return Err(Error::Dimension { op: "Episode::from_parts", detail: "label count differs from rows".into() });
        }
        if query.rows() > 0 && query.cols() != support.cols() {
            return Err(Error::Dimension { op: "Episode::from_parts", detail: "support and query widths differ".into() });
        }
        let count = |labels: &[usize]| -> Result<Vec<usize>> {
            let mut c = vec![0; n_way];
            for &l in labels {
                *c.get_mut(l).ok_or_else(|| Error::Capacity(format!("label {l} outside 0..{n_way}")))? += 1;
            }
            Ok(c)
        };
        let sc = count(&support_labels)?;
        let qc = count(&query_labels)?;
        if sc.iter().any(|&c| c != sc[0]) || qc.iter().any(|&c| c != qc[0]) {
            return Err(Error::Capacity("classes must have equal support and query counts".into()));
        }
        if sc[0] == 0 {
            return Err(Error::Capacity("every class needs at least one support sample".into()));
        }
        let refs = |labels: &[usize]| labels.iter().enumerate().map(|(i, &l)| SampleRef { class_index: l, sample: i }).collect();
        Ok(Self {
            n_way,
            k_shot: sc[0],
            m_query: qc[0],
            mode,
            class_ids: (0..n_way as u32).collect(),
            support_refs: refs(&support_labels),
            query_refs: refs(&query_labels),
            support,
            support_labels,
            query,
            query_labels,
        })
    }

    pub fn n_way(&self) -> usize {
        self.n_way
    }

    pub fn k_shot(&self) -> usize {
        self.k_shot
    }

    pub fn m_query(&self) -> usize {
        self.m_query
    }

    pub fn dim(&self) -> usize {
        self.support.cols()
    }

    /// Dataset class id of each episode class.
    pub fn class_ids(&self) -> &[u32] {
        &self.class_ids
    }

    pub fn support(&self) -> &Matrix {
        &self.support
    }

    pub fn support_labels(&self) -> &[usize] {
        &self.support_labels
    }

    /// Query features; in inductive mode only classification may read these.
    pub fn query(&self) -> &Matrix {
        &self.query
    }

    pub fn query_labels(&self) -> &[usize] {
        &self.query_labels
    }

    pub fn support_refs(&self) -> &[SampleRef] {
        &self.support_refs
    }

    pub fn query_refs(&self) -> &[SampleRef] {
        &self.query_refs
    }

    pub fn with_mode(mut self, mode: Mode) -> Self {
        self.mode = mode;
        self
    }

    /// The same episode with every feature row `x` replaced by `x R`.
    pub fn rotated(mut self, r: &Matrix) -> Result<Self> {
        let d = self.dim();
        if (r.rows(), r.cols()) != (d, d) {
            return Err(Error::Dimension { op: "Episode::rotated", detail: format!("rotation is {}x{}, features have width {d}", r.rows(), r.cols()) });
        }
        let apply = |m: &Matrix| -> Result<Matrix> {
            let mut out = vec![0.0; m.rows() * d];
            for (row, o) in m.iter_rows().zip(out.chunks_mut(d)) {
                for (x, rr) in row.iter().zip(r.iter_rows()) {
                    o.iter_mut().zip(rr).for_each(|(a, b)| *a += x * b);
                }
            }
            Matrix::new(m.rows(), d, out)
        };
        self.support = apply(&self.support)?;
        if self.query.rows() > 0 {
            self.query = apply(&self.query)?;
        }
        Ok(self)
    }

    /// Replaces the query features (same shape), e.g. to test that inductive
    /// adaptation ignores them.
    pub fn with_query(mut self, query: Matrix) -> Result<Self> {
        if (query.rows(), query.cols()) != (self.query.rows(), self.query.cols()) {
            return Err(Error::Dimension { op: "Episode::with_query", detail: "shape differs".into() });
        }
        self.query = query;
        Ok(self)
    }
}

/// Samples `n_way` classes without replacement, then `k_shot` support and
/// `m_query` query items per class without replacement. Deterministic in `seed`.
pub fn sample_episode(
    ds: &FeatureDataset,
    n_way: usize,
    k_shot: usize,
    m_query: usize,
    mode: Mode,
    seed: u64,
) -> Result<Episode> {
    if n_way == 0 || k_shot == 0 {
        return Err(Error::Capacity("n_way and k_shot must be at least 1".into()));
    }
    if ds.num_classes() < n_way {
        return Err(Error::Capacity(format!("{n_way}-way episode from {} classes", ds.num_classes())));
    }
    let need = k_shot + m_query;
    if let Some(c) = ds.classes.iter().find(|c| c.samples.rows() < need) {
        return Err(Error::Capacity(format!(
            "class {} has {} samples, episode needs {need}",
            c.id,
            c.samples.rows()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen = index::sample(&mut rng, ds.num_classes(), n_way).into_vec();
    let d = ds.dim;
    let mut support = Vec::with_capacity(n_way * k_shot * d);
    let mut query = Vec::with_capacity(n_way * m_query * d);
    let (mut support_labels, mut query_labels) = (Vec::new(), Vec::new());
    let (mut support_refs, mut query_refs) = (Vec::new(), Vec::new());
    for (label, &ci) in chosen.iter().enumerate() {
        let samples = &ds.classes[ci].samples;
        let picks = index::sample(&mut rng, samples.rows(), need).into_vec();
        for (j, &s) in picks.iter().enumerate() {
            let r = SampleRef { class_index: ci, sample: s };
            if j < k_shot {
                support.extend_from_slice(samples.row(s));
                support_labels.push(label);
                support_refs.push(r);
            } else {
                query.extend_from_slice(samples.row(s));
                query_labels.push(label);
                query_refs.push(r);
            }
        }
    }
    Ok(Episode {
        n_way,
        k_shot,
        m_query,
        mode,
        class_ids: chosen.iter().map(|&ci| ds.classes[ci].id).collect(),
        support: Matrix::new(n_way * k_shot, d, support)?,
        support_labels,
        query: Matrix::new(n_way * m_query, d, query)?,
        query_labels,
        support_refs,
        query_refs,
    })
}

/// Haar-distributed orthogonal `dim x dim` matrix: Gram-Schmidt on Gaussian
/// rows, deterministic in `seed`.
pub fn random_rotation(dim: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(dim);
    while rows.len() < dim {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        // Two passes keep the basis orthogonal to rounding error.
        for _ in 0..2 {
            for r in &rows {
                let c: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(r).for_each(|(a, b)| *a -= c * b);
            }
        }
        let n = norm(&v);
        if n > 1e-8 {
            v.iter_mut().for_each(|a| *a /= n);
            rows.push(v);
        }
    }
    Matrix::new(dim, dim, rows.concat()).expect("square matrix")
}

/// Seed of the `index`-th episode of a run seeded with `base` (SplitMix64).
pub fn episode_seed(base: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
