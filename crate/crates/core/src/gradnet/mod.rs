//! Gradient-flow inference network.
//!
//! `H` parallel inference modules each predict, for every class prototype
//! `p_k(t)`, one direction per adaptation sample and a softmax weight per
//! sample. Per-module weighted means and variances of the directions are then
//! fused by inverse-variance weighting and scaled by the decay
//! `beta(t) = beta0 * xi^(t / horizon)` to give `dp/dt`.
//!
//! Rows are laid out class-major: row `k * n + i` pairs prototype `k` with
//! sample `i` of the `n` adaptation samples.

mod checkpoint;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::episodes::{Episode, Mode};
use crate::error::{Error, Result};
use crate::numerics::{AffineParams, AttentionParams, BoundAffine, BoundAttention, Matrix, Tape, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradNetConfig {
    /// Number of inference modules `H`.
    pub num_modules: usize,
    pub feature_dim: usize,
    /// Hidden width of the two-layer scale network.
    pub hidden_dim: usize,
    /// Width of the embedding layer, also the attention model width.
    pub embed_dim: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub beta0: f64,
    pub xi: f64,
    pub variance_epsilon: f64,
    /// Width of the zero-padded class and label descriptors.
    pub max_ways: usize,
    /// Time at which the decay reaches `beta0 * xi`.
    pub decay_horizon: f64,
}

impl Default for GradNetConfig {
    fn default() -> Self {
        Self {
            num_modules: 4,
            feature_dim: 16,
            hidden_dim: 64,
            embed_dim: 64,
            heads: 4,
            head_dim: 16,
            beta0: 0.1,
            xi: 0.1,
            variance_epsilon: 1e-6,
            max_ways: 5,
            decay_horizon: 40.0,
        }
    }
}

impl GradNetConfig {
    /// Wide layers (512 hidden, 512 embedding, 8 heads of 16).
    pub fn full_widths(feature_dim: usize) -> Self {
        Self {
            feature_dim,
            hidden_dim: 512,
            embed_dim: 512,
            heads: 8,
            head_dim: 16,
            ..Self::default()
        }
    }

    /// Two modules of width 32 (2 heads of 16): small enough to meta-train in
    /// minutes on one core.
    pub fn desk(feature_dim: usize) -> Self {
        Self {
            num_modules: 2,
            feature_dim,
            hidden_dim: 32,
            embed_dim: 32,
            heads: 2,
            head_dim: 16,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.num_modules < 1 {
            return bad("num_modules must be >= 1");
        }
        if self.feature_dim < 1 || self.hidden_dim < 1 || self.embed_dim < 1 || self.max_ways < 1 {
            return bad("layer widths must be >= 1");
        }
        if self.heads < 1 || self.head_dim < 1 {
            return bad("attention needs heads >= 1 and head_dim >= 1");
        }
        if !(self.beta0 > 0.0) {
            return bad("beta0 must be positive");
        }
        if !(self.xi > 0.0 && self.xi <= 1.0) {
            return bad("xi must lie in (0, 1]");
        }
        if !(self.variance_epsilon > 0.0) {
            return bad("variance_epsilon must be positive");
        }
        if !(self.decay_horizon > 0.0) {
            return bad("decay_horizon must be positive");
        }
        Ok(())
    }

    /// Width of the embedding-layer input: `k' | p_k | y'_i | f_i | p_k * f_i`.
    pub fn embed_input_dim(&self) -> usize {
        2 * self.max_ways + 3 * self.feature_dim
    }

    /// Decay factor `beta0 * xi^(t / horizon)`.
    pub fn beta(&self, t: f64) -> f64 {
        // Written as a division so the defaults give exactly 0.1 and 0.01 at
        // the two ends of the horizon.
        self.beta0 / (1.0 / self.xi).powf(t / self.decay_horizon)
    }
}

/// Parameters of one inference module.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModuleParams {
    pub scale_hidden: AffineParams,
    pub scale_out: AffineParams,
    pub embed: AffineParams,
    pub relation: AttentionParams,
    pub output: AffineParams,
}

impl ModuleParams {
    pub fn init<R: Rng + ?Sized>(cfg: &GradNetConfig, rng: &mut R) -> Result<Self> {
        let d = cfg.feature_dim;
        let mut scale_out = AffineParams::glorot(cfg.hidden_dim, d, rng);
        // Start from the identity scale: directions begin as f_i - p_k.
        scale_out.weight.as_mut_slice().iter_mut().for_each(|w| *w = 0.0);
        scale_out.bias.iter_mut().for_each(|b| *b = 1.0);
        Ok(Self {
            scale_hidden: AffineParams::glorot(2 * d, cfg.hidden_dim, rng),
            scale_out,
            embed: AffineParams::glorot(cfg.embed_input_dim(), cfg.embed_dim, rng),
            relation: AttentionParams::glorot(cfg.embed_dim, cfg.heads, cfg.head_dim, rng)?,
            output: AffineParams::glorot(cfg.embed_dim, 1, rng),
        })
    }

    fn blocks(&self) -> Vec<(&'static str, Vec<usize>, &[f64])> {
        let m =|x: &Matrix| vec![x.rows(), x.cols()];
        vec![
            ("scale_hidden.weight", m(&self.scale_hidden.weight), self.scale_hidden.weight.as_slice()),
            ("scale_hidden.bias", vec![self.scale_hidden.bias.len()], &self.scale_hidden.bias),
            ("scale_out.weight", m(&self.scale_out.weight), self.scale_out.weight.as_slice()),
            ("scale_out.bias", vec![self.scale_out.bias.len()], &self.scale_out.bias),
            ("embed.weight", m(&self.embed.weight), self.embed.weight.as_slice()),
            ("embed.bias", vec![self.embed.bias.len()], &self.embed.bias),
            ("relation.query", m(&self.relation.query), self.relation.query.as_slice()),
            ("relation.key", m(&self.relation.key), self.relation.key.as_slice()),
            ("relation.value", m(&self.relation.value), self.relation.value.as_slice()),
            ("relation.output", m(&self.relation.output), self.relation.output.as_slice()),
            ("output.weight", m(&self.output.weight), self.output.weight.as_slice()),
            ("output.bias", vec![self.output.bias.len()], &self.output.bias),
        ]
    }

    fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.scale_hidden.weight.as_mut_slice(),
            &mut self.scale_hidden.bias,
            self.scale_out.weight.as_mut_slice(),
            &mut self.scale_out.bias,
            self.embed.weight.as_mut_slice(),
            &mut self.embed.bias,
            self.relation.query.as_mut_slice(),
            self.relation.key.as_mut_slice(),
            self.relation.value.as_mut_slice(),
            self.relation.output.as_mut_slice(),
            self.output.weight.as_mut_slice(),
            &mut self.output.bias,
        ]
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> Result<BoundModule<'t>> {
        Ok(BoundModule {
            scale_hidden: self.scale_hidden.bind(tape)?,
            scale_out: self.scale_out.bind(tape)?,
            embed: self.embed.bind(tape)?,
            relation: self.relation.bind(tape)?,
            output: self.output.bind(tape)?,
        })
    }
}

/// A named, shaped view of one parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamBlock<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: &'a [f64],
}

/// All learnable parameters of the network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradNetParams {
    pub modules: Vec<ModuleParams>,
}

impl GradNetParams {
    pub fn init<R: Rng + ?Sized>(cfg: &GradNetConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let modules = (0..cfg.num_modules)
            .map(|_| ModuleParams::init(cfg, rng))
            .collect::<Result<_>>()?;
        Ok(Self { modules })
    }

    /// Blocks in canonical order (module-major), named `m{l}.{layer}.{part}`.
    pub fn blocks(&self) -> Vec<ParamBlock<'_>> {
        self.modules
            .iter()
            .enumerate()
            .flat_map(|(l, m)| {
                m.blocks().into_iter().map(move |(name, shape, values)| ParamBlock {
                    name: format!("m{l}.{name}"),
                    shape,
                    values,
                })
            })
            .collect()
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        self.modules.iter_mut().flat_map(|m| m.blocks_mut()).collect()
    }

    pub fn num_params(&self) -> usize {
        self.blocks().iter().map(|b| b.values.len()).sum()
    }

    /// All parameters concatenated in canonical block order.
    pub fn flatten(&self) -> Vec<f64> {
        self.blocks().iter().flat_map(|b| b.values.iter().copied()).collect()
    }

    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::Dimension {
                op: "GradNetParams::assign_flat",
                detail: format!("{} values for {} parameters", flat.len(), self.num_params()),
            });
        }
        let mut offset = 0;
        for block in self.blocks_mut() {
            block.copy_from_slice(&flat[offset..offset + block.len()]);
            offset += block.len();
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().iter().all(|b| b.values.iter().all(|v| v.is_finite()))
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> Result<BoundGradNet<'t>> {
        Ok(BoundGradNet {
            modules: self.modules.iter().map(|m| m.bind(tape)).collect::<Result<_>>()?,
        })
    }

    /// Uses caller-supplied tensors, in canonical block order, as the
    /// network weights. Shapes must match this parameter set.
    pub fn bind_tensors<'t>(&self, tensors: &[Tensor<'t>]) -> Result<BoundGradNet<'t>> {
        let blocks = self.blocks();
        if tensors.len() != blocks.len() {
            return Err(Error::Dimension {
                op: "GradNetParams::bind_tensors",
                detail: format!("{} tensors for {} blocks", tensors.len(), blocks.len()),
            });
        }
        for (t, b) in tensors.iter().zip(&blocks) {
            if t.shape() != b.shape {
                return Err(Error::Dimension {
                    op: "GradNetParams::bind_tensors",
                    detail: format!("{} has shape {:?}, expected {:?}", b.name, t.shape(), b.shape),
                });
            }
        }
        let modules = self
            .modules
            .iter()
            .zip(tensors.chunks(12))
            .map(|(m, t)| BoundModule {
                scale_hidden: BoundAffine { weight: t[0], bias: t[1] },
                scale_out: BoundAffine { weight: t[2], bias: t[3] },
                embed: BoundAffine { weight: t[4], bias: t[5] },
                relation: BoundAttention { heads: m.relation.heads, query: t[6], key: t[7], value: t[8], output: t[9] },
                output: BoundAffine { weight: t[10], bias: t[11] },
            })
            .collect();
        Ok(BoundGradNet { modules })
    }
}

/// Module parameters as tracked leaves on a tape.
#[derive(Debug, Clone, Copy)]
pub struct BoundModule<'t> {
    pub scale_hidden: BoundAffine<'t>,
    pub scale_out: BoundAffine<'t>,
    pub embed: BoundAffine<'t>,
    pub relation: BoundAttention<'t>,
    pub output: BoundAffine<'t>,
}

impl<'t> BoundModule<'t> {
    fn tensors(&self) -> [Tensor<'t>; 12] {
        [
            self.scale_hidden.weight,
            self.scale_hidden.bias,
            self.scale_out.weight,
            self.scale_out.bias,
            self.embed.weight,
            self.embed.bias,
            self.relation.query,
            self.relation.key,
            self.relation.value,
            self.relation.output,
            self.output.weight,
            self.output.bias,
        ]
    }
}

#[derive(Debug, Clone)]
pub struct BoundGradNet<'t> {
    pub modules: Vec<BoundModule<'t>>,
}

impl<'t> BoundGradNet<'t> {
    /// Parameter leaves in the canonical block order of [`GradNetParams::blocks`].
    pub fn tensors(&self) -> Vec<Tensor<'t>> {
        self.modules.iter().flat_map(|m| m.tensors()).collect()
    }

    /// Flattened gradient in canonical order.
    pub fn flat_gradient(&self, grads: &crate::numerics::Gradients) -> Vec<f64> {
        self.tensors().into_iter().flat_map(|t| grads.wrt(t)).collect()
    }
}

/// Adaptation samples with their label descriptors: one-hot rows for labelled
/// samples and the uniform `1/N` row for unlabelled ones, zero-padded to
/// `max_ways` columns.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub features: Matrix,
    pub descriptors: Matrix,
}

impl SampleSet {
    /// Support samples, followed by the query features in transductive mode.
    pub fn from_episode(ep: &Episode, max_ways: usize) -> Result<Self> {
        let n_way = ep.n_way();
        if n_way > max_ways {
            return Err(Error::Config(format!("{n_way}-way episode exceeds max_ways = {max_ways}")));
        }
        let d = ep.dim();
        let mut features = ep.support().as_slice().to_vec();
        let mut descriptors = Vec::new();
        for &y in ep.support_labels() {
            let mut row = vec![0.0; max_ways];
            row[y] = 1.0;
            descriptors.extend(row);
        }
        let mut n = ep.support().rows();
        if ep.mode == Mode::Transductive {
            features.extend_from_slice(ep.query().as_slice());
            for _ in 0..ep.query().rows() {
                let mut row = vec![0.0; max_ways];
                row[..n_way].iter_mut().for_each(|v| *v = 1.0 / n_way as f64);
                descriptors.extend(row);
            }
            n += ep.query().rows();
        }
        Ok(Self {
            features: Matrix::new(n, d, features)?,
            descriptors: Matrix::new(n, max_ways, descriptors)?,
        })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Constant per-episode tensors shared by every module and every solver stage.
#[derive(Debug, Clone)]
pub struct PairInputs<'t> {
    pub n_way: usize,
    pub n_samples: usize,
    /// `f_i` for every (k, i) row.
    features: Tensor<'t>,
    /// `[k' | y'_i]` padded class and label descriptors for every row.
    class_desc: Tensor<'t>,
    label_desc: Tensor<'t>,
    /// Prototype row of every (k, i) row.
    class_of_row: Vec<usize>,
}

impl<'t> PairInputs<'t> {
    pub fn new(tape: &'t Tape, samples: &SampleSet, n_way: usize, max_ways: usize) -> Result<Self> {
        let n = samples.len();
        if n == 0 {
            return Err(Error::EmptySet { what: "adaptation samples" });
        }
        if n_way > max_ways || samples.descriptors.cols() != max_ways {
            return Err(Error::Config(format!("{n_way}-way episode exceeds max_ways = {max_ways}")));
        }
        let d = samples.features.cols();
        let rows = n_way * n;
        let mut feats = Vec::with_capacity(rows * d);
        let mut labels = Vec::with_capacity(rows * max_ways);
        let mut classes = Vec::with_capacity(rows * max_ways);
        let mut class_of_row = Vec::with_capacity(rows);
        for k in 0..n_way {
            let mut onehot = vec![0.0; max_ways];
            onehot[k] = 1.0;
            for i in 0..n {
                feats.extend_from_slice(samples.features.row(i));
                labels.extend_from_slice(samples.descriptors.row(i));
                classes.extend_from_slice(&onehot);
                class_of_row.push(k);
            }
        }
        Ok(Self {
            n_way,
            n_samples: n,
            features: tape.constant(&[rows, d], feats)?,
            class_desc: tape.constant(&[rows, max_ways], classes)?,
            label_desc: tape.constant(&[rows, max_ways], labels)?,
            class_of_row,
        })
    }

    fn check_prototypes(&self, p: Tensor<'t>) -> Result<()> {
        let shape = p.shape();
        let d = self.features.shape()[1];
        if shape != [self.n_way, d] {
            return Err(Error::Dimension {
                op: "gradnet",
                detail: format!("prototypes {shape:?}, expected [{}, {d}]", self.n_way),
            });
        }
        Ok(())
    }

    fn prototype_rows(&self, p: Tensor<'t>) -> Result<Tensor<'t>> {
        self.check_prototypes(p)?;
        p.gather_rows(&self.class_of_row)
    }
}

fn directions_from_rows<'t>(module: &BoundModule<'t>, inputs: &PairInputs<'t>, prep: Tensor<'t>) -> Result<Tensor<'t>> {
    let tape = prep.tape();
    let f = inputs.features;
    let hidden = module.scale_hidden.forward(tape.concat(&[f, prep], 1)?)?.elu()?;
    let scale = module.scale_out.forward(hidden)?;
    scale.mul(f)?.sub(prep)
}

fn weights_from_rows<'t>(module: &BoundModule<'t>, inputs: &PairInputs<'t>, prep: Tensor<'t>) -> Result<Tensor<'t>> {
    let tape = prep.tape();
    let f = inputs.features;
    let z = tape.concat(&[inputs.class_desc, prep, inputs.label_desc, f, prep.mul(f)?], 1)?;
    let h = module.embed.forward(z)?.elu()?;
    let related = h.add(module.relation.forward_blocks(h, inputs.n_way)?)?;
    module
        .output
        .forward(related)?
        .reshape(&[inputs.n_way, inputs.n_samples])?
        .softmax(1)
}

/// Per-(k, i) directions `s_ki * f_i - p_k`, where `s_ki` is the two-layer
/// scale network applied to `f_i | p_k`. Shape `[N, n, d]`.
pub fn estimate_directions<'t>(module: &BoundModule<'t>, inputs: &PairInputs<'t>, p: Tensor<'t>) -> Result<Tensor<'t>> {
    let d = p.shape()[1];
    directions_from_rows(module, inputs, inputs.prototype_rows(p)?)?.reshape(&[inputs.n_way, inputs.n_samples, d])
}

/// Per-(k, i) sample weights, a softmax over samples for each class. Shape `[N, n]`.
pub fn generate_weights<'t>(module: &BoundModule<'t>, inputs: &PairInputs<'t>, p: Tensor<'t>) -> Result<Tensor<'t>> {
    weights_from_rows(module, inputs, inputs.prototype_rows(p)?)
}

/// Weighted mean and elementwise weighted variance of the directions of each
/// class: `mu = sum_i w_i d_i`, `var = sum_i w_i (d_i - mu)^2`.
///
/// `directions` is `[N, n, d]` (or `[N * n, d]`), `weights` holds `N * n` values.
pub fn weighted_moments<'t>(directions: Tensor<'t>, weights: Tensor<'t>, n_way: usize) -> Result<(Tensor<'t>, Tensor<'t>)> {
    let total = weights.numel();
    if n_way == 0 || total % n_way != 0 {
        return Err(Error::Dimension { op: "weighted_moments", detail: format!("{total} weights for {n_way} classes") });
    }
    let n = total / n_way;
    let rows: Vec<usize> = (0..n_way).flat_map(|k| std::iter::repeat_n(k, n)).collect();
    let mu = directions.mul_rows(weights)?.segment_sum(n_way)?;
    let centred = directions.sub(mu.gather_rows(&rows)?.reshape(&directions.shape())?)?;
    let var = centred.square()?.mul_rows(weights)?.segment_sum(n_way)?;
    Ok((mu, var))
}

/// Inverse-variance fusion of the module means, scaled by `beta(t)`:
/// `beta * [sum_l 1/(var_l + eps)]^-1 * [sum_l mu_l / (var_l + eps)]`.
/// With a single module this is exactly `beta * mu`.
pub fn ensemble<'t>(mus: &[Tensor<'t>], vars: &[Tensor<'t>], t: f64, cfg: &GradNetConfig) -> Result<Tensor<'t>> {
    if mus.is_empty() || mus.len() != vars.len() {
        return Err(Error::Dimension { op: "ensemble", detail: format!("{} means, {} variances", mus.len(), vars.len()) });
    }
    let beta = cfg.beta(t);
    if mus.len() == 1 {
        return mus[0].scale(beta);
    }
    let mut num: Option<Tensor<'t>> = None;
    let mut den: Option<Tensor<'t>> = None;
    for (mu, var) in mus.iter().zip(vars) {
        let precision = var.add_scalar(cfg.variance_epsilon)?.recip()?;
        let weighted = precision.mul(*mu)?;
        num = Some(match num {
            None => weighted,
            Some(acc) => acc.add(weighted)?,
        });
        den = Some(match den {
            None => precision,
            Some(acc) => acc.add(precision)?,
        });
    }
    num.unwrap().div(den.unwrap())?.scale(beta)
}

/// Per-module means and variances at prototypes `p`.
pub fn module_moments<'t>(
    net: &BoundGradNet<'t>,
    inputs: &PairInputs<'t>,
    p: Tensor<'t>,
) -> Result<Vec<(Tensor<'t>, Tensor<'t>)>> {
    let prep = inputs.prototype_rows(p)?;
    net.modules
        .iter()
        .map(|m| {
            let dirs = directions_from_rows(m, inputs, prep)?;
            let w = weights_from_rows(m, inputs, prep)?;
            weighted_moments(dirs, w, inputs.n_way)
        })
        .collect()
}

/// `dp/dt` at prototypes `p` and time `t`.
pub fn gradnet_forward<'t>(
    net: &BoundGradNet<'t>,
    cfg: &GradNetConfig,
    inputs: &PairInputs<'t>,
    p: Tensor<'t>,
    t: f64,
) -> Result<Tensor<'t>> {
    let moments = module_moments(net, inputs, p)?;
    let (mus, vars): (Vec<_>, Vec<_>) = moments.into_iter().unzip();
    ensemble(&mus, &vars, t, cfg)
}

/// Convenience wrapper evaluating `dp/dt` for an episode outside any training graph.
pub fn gradnet_field(params: &GradNetParams, cfg: &GradNetConfig, ep: &Episode, p: &Matrix, t: f64) -> Result<Matrix> {
    let tape = Tape::new();
    let net = params.bind(&tape)?;
    let samples = SampleSet::from_episode(ep, cfg.max_ways)?;
    let inputs = PairInputs::new(&tape, &samples, ep.n_way(), cfg.max_ways)?;
    let p = tape.constant_matrix(p)?;
    Ok(gradnet_forward(&net, cfg, &inputs, p, t)?.to_matrix())
}
