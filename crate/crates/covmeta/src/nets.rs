//! Network architecture: the task MLP with a bias-transform input channel,
//! the covariate-set RNN encoder with Gaussian heads, the per-layer gate
//! maps that turn a latent draw into a task-parameter initialization, and
//! the covariate decoder used by the reconstruction term.
//!
//! All parameters live in one flat `f64` vector whose block structure is
//! described by a [`Layout`]; checkpoints serialize this descriptor and
//! refuse to load into a different one.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Architecture hyperparameters. Defaults match the benchmark model; tests
/// shrink every width to keep finite-difference batteries fast.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchSpec {
    /// Hidden widths of the task MLP (output layer of width 1 is implicit).
    pub hidden: Vec<usize>,
    /// Width of the learned bias-transform vector appended to the input.
    pub bt_dim: usize,
    /// Latent dimension; the encoder RNN hidden state has the same width.
    pub d_z: usize,
    /// Hidden width of the covariate decoder.
    pub dec_hidden: usize,
    /// Encoder input width: 1 = covariates only, 2 = (x, y) pairs.
    pub enc_in: usize,
}

impl Default for ArchSpec {
    fn default() -> Self {
        ArchSpec {
            hidden: vec![100, 100, 100],
            bt_dim: 20,
            d_z: 28,
            dec_hidden: 32,
            enc_in: 1,
        }
    }
}

impl ArchSpec {
    /// Miniature architecture for gradient-check batteries.
    pub fn miniature() -> Self {
        ArchSpec {
            hidden: vec![6, 5],
            bt_dim: 3,
            d_z: 4,
            dec_hidden: 4,
            enc_in: 1,
        }
    }

    /// (in, out) of every task-MLP layer, in order.
    pub fn mlp_layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 1);
        let mut prev = 1 + self.bt_dim;
        for &h in &self.hidden {
            dims.push((prev, h));
            prev = h;
        }
        dims.push((prev, 1));
        dims
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden.is_empty() || self.hidden.iter().any(|&h| h == 0) {
            return Err(Error::Invalid("hidden widths must be nonzero".into()));
        }
        if self.bt_dim == 0 || self.d_z == 0 || self.dec_hidden == 0 {
            return Err(Error::Invalid(
                "bt_dim, d_z and dec_hidden must be nonzero".into(),
            ));
        }
        if !(self.enc_in == 1 || self.enc_in == 2) {
            return Err(Error::Invalid(format!(
                "enc_in must be 1 (covariates) or 2 (pairs), got {}",
                self.enc_in
            )));
        }
        Ok(())
    }
}

/// One named block inside the flat parameter vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl Block {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Ordered block structure of a flat parameter vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    pub blocks: Vec<Block>,
    pub total: usize,
}

impl Layout {
    fn new() -> Self {
        Layout {
            blocks: Vec::new(),
            total: 0,
        }
    }

    fn push(&mut self, name: impl Into<String>, shape: Vec<usize>) {
        let len: usize = shape.iter().product();
        self.blocks.push(Block {
            name: name.into(),
            shape,
            offset: self.total,
        });
        self.total += len;
    }

    pub fn find(&self, name: &str) -> Result<&Block> {
        self.blocks
            .iter()
            .find(|b| b.name == name)
            .ok_or_else(|| Error::Invalid(format!("no parameter block named {name:?}")))
    }

    /// FNV-1a hash of the canonical JSON of this layout (checkpoint guard).
    pub fn hash(&self) -> u64 {
        let json = serde_json::to_string(self).expect("layout serializes");
        let mut h: u64 = 0xCBF2_9CE4_8422_2325;
        for byte in json.as_bytes() {
            h ^= u64::from(*byte);
            h = h.wrapping_mul(0x0000_0100_0000_01B3);
        }
        h
    }
}

/// Blocks of the task-MLP parameter vector: per layer weight then bias, and
/// the bias-transform vector last. Shared by the gated initialization (as
/// the structure of θ_base and of λ) and by the plain-initialization
/// baselines (as their whole parameter vector).
pub fn mlp_layout(arch: &ArchSpec, prefix: &str) -> Layout {
    let mut l = Layout::new();
    for (i, (ind, out)) in arch.mlp_layer_dims().iter().enumerate() {
        l.push(format!("{prefix}.layer{i}.weight"), vec![*out, *ind]);
        l.push(format!("{prefix}.layer{i}.bias"), vec![*out]);
    }
    l.push(format!("{prefix}.bias_transform"), vec![arch.bt_dim]);
    l
}

/// Full meta-parameter layout of the covariate-conditioned model:
/// θ_base blocks, encoder, per-layer gates, decoder — in that order.
pub fn full_layout(arch: &ArchSpec) -> Layout {
    let mut l = mlp_layout(arch, "theta_base");
    let h = arch.d_z; // RNN hidden width equals the latent width
    l.push("encoder.w_xh", vec![h, arch.enc_in]);
    l.push("encoder.w_hh", vec![h, h]);
    l.push("encoder.b_h", vec![h]);
    l.push("encoder.head_mu.weight", vec![arch.d_z, h]);
    l.push("encoder.head_mu.bias", vec![arch.d_z]);
    l.push("encoder.head_logvar.weight", vec![arch.d_z, h]);
    l.push("encoder.head_logvar.bias", vec![arch.d_z]);
    for (i, (_, out)) in arch.mlp_layer_dims().iter().enumerate() {
        l.push(format!("gates.layer{i}.weight"), vec![*out, arch.d_z]);
        l.push(format!("gates.layer{i}.bias"), vec![*out]);
    }
    l.push("decoder.layer0.weight", vec![arch.dec_hidden, arch.d_z]);
    l.push("decoder.layer0.bias", vec![arch.dec_hidden]);
    l.push("decoder.layer1.weight", vec![2, arch.dec_hidden]);
    l.push("decoder.layer1.bias", vec![2]);
    l
}

/// Initialize a flat parameter vector for `layout`: rank-2 blocks get
/// Glorot-uniform draws (limit √(6/(fan_in+fan_out))), rank-1 blocks are
/// zero (biases, the bias-transform, and the log-variance head bias).
/// Block `i` draws from substream `i` of `model_seed`, so two layouts that
/// agree on a block prefix (e.g. θ_base here and the full vector of a
/// plain-initialization baseline) produce identical values there.
pub fn init_params(layout: &Layout, model_seed: u64) -> Vec<f64> {
    let mut data = vec![0.0; layout.total];
    for (i, block) in layout.blocks.iter().enumerate() {
        if block.shape.len() == 2 {
            let (out, ind) = (block.shape[0], block.shape[1]);
            let limit = (6.0 / (out + ind) as f64).sqrt();
            let mut stream = rng::Stream::new(rng::derive(model_seed, i as u64));
            for v in &mut data[block.offset..block.offset + block.len()] {
                *v = stream.uniform(-limit, limit);
            }
        }
    }
    data
}

/// A parameter vector uploaded to the tape one node per layout block, each
/// node shaped as the layout declares (weights (out,in), biases (out)).
///
/// Uploading block-by-block — instead of as one flat node that every use
/// slices apart — keeps the recorded graph free of slice/pad round-trips.
/// A flat upload pays for each slice with a full-width zero-padded adjoint
/// on the backward pass, which multiplies tape memory by the number of
/// slices; per-block leaves make every adjoint block-sized.
pub struct ParamNodes<'a> {
    layout: &'a Layout,
    nodes: Vec<NodeId>,
}

impl<'a> ParamNodes<'a> {
    fn upload(
        tape: &mut Tape,
        layout: &'a Layout,
        data: &[f64],
        as_input: bool,
    ) -> Result<Self> {
        if data.len() != layout.total {
            return Err(Error::Invalid(format!(
                "parameter vector has {} elements, layout expects {}",
                data.len(),
                layout.total
            )));
        }
        let mut nodes = Vec::with_capacity(layout.blocks.len());
        for b in &layout.blocks {
            let t = Tensor::new(b.shape.clone(), data[b.offset..b.offset + b.len()].to_vec())?;
            nodes.push(if as_input {
                tape.input(t)
            } else {
                tape.constant(t)
            });
        }
        Ok(ParamNodes { layout, nodes })
    }

    /// Upload as gradient leaves (training: the objective is differentiated
    /// with respect to these nodes).
    pub fn input(tape: &mut Tape, layout: &'a Layout, data: &[f64]) -> Result<Self> {
        Self::upload(tape, layout, data, true)
    }

    /// Upload as constants (evaluation: nothing differentiates through β).
    pub fn constant(tape: &mut Tape, layout: &'a Layout, data: &[f64]) -> Result<Self> {
        Self::upload(tape, layout, data, false)
    }

    /// The node holding the named block.
    pub fn get(&self, name: &str) -> Result<NodeId> {
        self.layout
            .blocks
            .iter()
            .position(|b| b.name == name)
            .map(|i| self.nodes[i])
            .ok_or_else(|| Error::Invalid(format!("no parameter block named {name:?}")))
    }

    /// All block nodes, in layout order — the `wrt` list for a gradient of
    /// the whole vector.
    pub fn nodes(&self) -> &[NodeId] {
        &self.nodes
    }

    pub fn layout(&self) -> &Layout {
        self.layout
    }
}

/// Task-net parameters λ as per-block tape nodes: (weight, bias) per layer
/// in forward order, plus the bias-transform vector — the same blocks as
/// [`mlp_layout`], in the same order.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskParams {
    pub layers: Vec<(NodeId, NodeId)>,
    pub bias_transform: NodeId,
}

impl TaskParams {
    /// Select the `{prefix}.layer{i}.*` and `{prefix}.bias_transform` blocks
    /// of an uploaded vector as task-net parameters (ungated pass-through).
    pub fn from_blocks(beta: &ParamNodes, prefix: &str) -> Result<Self> {
        let n_layers = beta
            .layout
            .blocks
            .iter()
            .filter(|b| b.name.starts_with(prefix) && b.name.ends_with(".weight"))
            .count();
        let mut layers = Vec::with_capacity(n_layers);
        for i in 0..n_layers {
            layers.push((
                beta.get(&format!("{prefix}.layer{i}.weight"))?,
                beta.get(&format!("{prefix}.layer{i}.bias"))?,
            ));
        }
        Ok(TaskParams {
            layers,
            bias_transform: beta.get(&format!("{prefix}.bias_transform"))?,
        })
    }

    /// Blocks in canonical (layout) order: layer weights and biases
    /// interleaved, bias-transform last.
    pub fn nodes(&self) -> Vec<NodeId> {
        let mut out = Vec::with_capacity(2 * self.layers.len() + 1);
        for &(w, b) in &self.layers {
            out.push(w);
            out.push(b);
        }
        out.push(self.bias_transform);
        out
    }

    /// Inverse of [`TaskParams::nodes`].
    pub fn from_nodes(nodes: &[NodeId]) -> Self {
        let n_layers = (nodes.len() - 1) / 2;
        TaskParams {
            layers: (0..n_layers).map(|i| (nodes[2 * i], nodes[2 * i + 1])).collect(),
            bias_transform: nodes[nodes.len() - 1],
        }
    }

    /// Current values of all blocks, concatenated in layout order (the flat
    /// vector the same blocks were uploaded from).
    pub fn flat_value(&self, tape: &Tape) -> Vec<f64> {
        let mut out = Vec::new();
        for id in self.nodes() {
            out.extend_from_slice(tape.value(id).data());
        }
        out
    }
}

/// Forward pass of the task MLP at parameters `lambda`.
///
/// The input column `x` (m,1) is augmented with the broadcast bias-transform
/// row, then passed through ReLU hidden layers and a linear output layer.
pub fn mlp_forward(tape: &mut Tape, lambda: &TaskParams, x: NodeId) -> Result<NodeId> {
    let m = tape.value(x).shape()[0];
    let bt = lambda.bias_transform;
    let bt_dim = tape.value(bt).numel();
    let bt_row = tape.reshape(bt, &[1, bt_dim])?;
    let bt_b = tape.broadcast(bt_row, &[m, bt_dim])?;
    let mut h = tape.concat(vec![x, bt_b])?;
    let n_layers = lambda.layers.len();
    for (i, &(w, b)) in lambda.layers.iter().enumerate() {
        let out = tape.value(b).numel();
        let b_row = tape.reshape(b, &[1, out])?;
        let pre = tape.matmul_nt(h, w)?;
        let pre = tape.add(pre, b_row)?;
        h = if i + 1 < n_layers {
            tape.relu(pre)?
        } else {
            pre
        };
    }
    Ok(h)
}

/// Canonical presentation order of a support set for the encoder: ascending
/// by covariate, with the response breaking ties in pairs mode. Sorting is
/// what makes the encoder exactly permutation-invariant.
pub fn canonical_order(xs: &[f64], ys: &[f64], pairs: bool) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| {
        let primary = xs[a].total_cmp(&xs[b]);
        if pairs {
            primary.then(ys[a].total_cmp(&ys[b]))
        } else {
            primary
        }
    });
    idx
}

/// Posterior parameters produced by the encoder.
pub struct Posterior {
    /// (1, d_z)
    pub mu: NodeId,
    /// (1, d_z), strictly positive (σ = exp(½·logvar))
    pub sigma: NodeId,
}

/// Run the RNN encoder over a support set and return the Gaussian head
/// outputs. In covariate mode only `xs` is consumed; in pairs mode each
/// step sees the (x, y) pair. The set is presented in canonical order.
pub fn encode_support(
    tape: &mut Tape,
    beta: &ParamNodes,
    arch: &ArchSpec,
    xs: &[f64],
    ys: &[f64],
) -> Result<Posterior> {
    if xs.is_empty() {
        return Err(Error::Invalid("encoder needs a non-empty support set".into()));
    }
    if arch.enc_in == 2 && ys.len() != xs.len() {
        return Err(Error::Invalid(format!(
            "pairs encoder needs matching xs/ys lengths, got {} vs {}",
            xs.len(),
            ys.len()
        )));
    }
    let pairs = arch.enc_in == 2;
    let order = canonical_order(xs, ys, pairs);

    let w_xh = beta.get("encoder.w_xh")?;
    let w_hh = beta.get("encoder.w_hh")?;
    let b_h = beta.get("encoder.b_h")?;
    let hdim = tape.value(b_h).numel();
    let b_row = tape.reshape(b_h, &[1, hdim])?;

    let mut h = tape.constant(Tensor::zeros(&[1, hdim]));
    for &j in &order {
        let step_in = if pairs {
            Tensor::new(vec![1, 2], vec![xs[j], ys[j]])?
        } else {
            Tensor::new(vec![1, 1], vec![xs[j]])?
        };
        let x_row = tape.constant(step_in);
        let from_x = tape.matmul_nt(x_row, w_xh)?;
        let from_h = tape.matmul_nt(h, w_hh)?;
        let lin = tape.add(from_x, from_h)?;
        let pre = tape.add(lin, b_row)?;
        h = tape.tanh(pre)?;
    }

    let w_mu = beta.get("encoder.head_mu.weight")?;
    let b_mu = beta.get("encoder.head_mu.bias")?;
    let b_mu_row = tape.reshape(b_mu, &[1, arch.d_z])?;
    let mu_lin = tape.matmul_nt(h, w_mu)?;
    let mu = tape.add(mu_lin, b_mu_row)?;

    let w_lv = beta.get("encoder.head_logvar.weight")?;
    let b_lv = beta.get("encoder.head_logvar.bias")?;
    let b_lv_row = tape.reshape(b_lv, &[1, arch.d_z])?;
    let lv_lin = tape.matmul_nt(h, w_lv)?;
    let logvar = tape.add(lv_lin, b_lv_row)?;
    let half = tape.scale(logvar, 0.5)?;
    let sigma = tape.exp(half)?;

    Ok(Posterior { mu, sigma })
}

/// z = μ + σ⊙ε for a fixed noise draw ε (shape (1, d_z)).
pub fn reparameterize(tape: &mut Tape, post: &Posterior, eps: &Tensor) -> Result<NodeId> {
    let e = tape.constant(eps.clone());
    let scaled = tape.mul(post.sigma, e)?;
    tape.add(post.mu, scaled)
}

/// Summed log-likelihood of the support covariates under the decoder's
/// Gaussian: decoder(z) → (mean, log-variance) of a single Gaussian that
/// the support covariates are scored against.
pub fn decode_covariate_loglik(
    tape: &mut Tape,
    beta: &ParamNodes,
    z: NodeId,
    xs: &[f64],
) -> Result<NodeId> {
    if xs.is_empty() {
        return Err(Error::Invalid("decoder needs a non-empty support set".into()));
    }
    let w1 = beta.get("decoder.layer0.weight")?;
    let b1 = beta.get("decoder.layer0.bias")?;
    let hdim = tape.value(b1).numel();
    let b1_row = tape.reshape(b1, &[1, hdim])?;
    let lin1 = tape.matmul_nt(z, w1)?;
    let pre1 = tape.add(lin1, b1_row)?;
    let h = tape.relu(pre1)?;

    let w2 = beta.get("decoder.layer1.weight")?;
    let b2 = beta.get("decoder.layer1.bias")?;
    let b2_row = tape.reshape(b2, &[1, 2])?;
    let lin2 = tape.matmul_nt(h, w2)?;
    let out = tape.add(lin2, b2_row)?; // (1,2): [mean, logvar]

    let mean = tape.slice(out, 0, 1)?;
    let logvar = tape.slice(out, 1, 1)?;
    let half = tape.scale(logvar, 0.5)?;
    let sigma = tape.exp(half)?;

    let x_col = tape.constant(Tensor::new(vec![xs.len(), 1], xs.to_vec())?);
    tape.gaussian_log_density(x_col, mean, sigma)
}

/// Build the task-parameter initialization λ⁰ from a latent draw: each
/// θ_base layer is modulated row-wise (and bias-wise) by its sigmoid gate,
/// and the bias-transform block passes through ungated.
///
/// `bypass` skips gating entirely and returns the θ_base blocks themselves —
/// the plain-initialization pathway used by equivalence tests.
pub fn init_from_latent(
    tape: &mut Tape,
    beta: &ParamNodes,
    arch: &ArchSpec,
    z: NodeId,
    bypass: bool,
) -> Result<TaskParams> {
    if bypass {
        return TaskParams::from_blocks(beta, "theta_base");
    }
    let mut layers = Vec::new();
    for (i, (_, out)) in arch.mlp_layer_dims().iter().enumerate() {
        let u = beta.get(&format!("gates.layer{i}.weight"))?;
        let c = beta.get(&format!("gates.layer{i}.bias"))?;
        let c_row = tape.reshape(c, &[1, *out])?;
        let glin = tape.matmul_nt(z, u)?;
        let gpre = tape.add(glin, c_row)?;
        let gate = tape.sigmoid(gpre)?; // (1, out)

        let w = beta.get(&format!("theta_base.layer{i}.weight"))?;
        let gate_col = tape.reshape(gate, &[*out, 1])?;
        let w_mod = tape.mul(w, gate_col)?; // row-wise modulation

        let b = beta.get(&format!("theta_base.layer{i}.bias"))?;
        let gate_flat = tape.reshape(gate, &[*out])?;
        let b_mod = tape.mul(b, gate_flat)?;
        layers.push((w_mod, b_mod));
    }
    Ok(TaskParams {
        layers,
        bias_transform: beta.get("theta_base.bias_transform")?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::{finite_difference_grad, relative_error};

    /// Concatenate task-net blocks back into one rank-1 node (layout order),
    /// so tests can compare against flat-vector arithmetic.
    fn flatten_task_params(tape: &mut Tape, tp: &TaskParams) -> NodeId {
        let parts: Vec<NodeId> = tp
            .nodes()
            .iter()
            .map(|&id| {
                let v = tape.value(id);
                let (rank, n) = (v.shape().len(), v.numel());
                if rank == 1 {
                    id
                } else {
                    tape.reshape(id, &[n]).unwrap()
                }
            })
            .collect();
        tape.concat(parts).unwrap()
    }

    /// Gradient w.r.t. every block of `beta`, reassembled into the flat
    /// vector order that finite differencing produces.
    fn flat_grad(tape: &mut Tape, root: NodeId, beta: &ParamNodes) -> Vec<f64> {
        let gs = tape.backward_values(root, beta.nodes()).unwrap();
        let mut out = Vec::with_capacity(beta.layout().total);
        for g in &gs {
            out.extend_from_slice(g.data());
        }
        out
    }

    #[test]
    fn default_layout_block_sizes_are_frozen() {
        let arch = ArchSpec::default();
        let mlp = mlp_layout(&arch, "theta_base");
        assert_eq!(mlp.total, 22_521); // 4 layers + 20-wide bias transform
        let full = full_layout(&arch);
        assert_eq!(full.total, 34_708); // + encoder 2464, gates 8729, decoder 994
        assert_eq!(full.blocks.len(), 9 + 7 + 8 + 4);
        // offsets are contiguous
        let mut expect = 0;
        for b in &full.blocks {
            assert_eq!(b.offset, expect);
            expect += b.len();
        }
        assert_eq!(expect, full.total);
        // pairs-mode encoder widens only w_xh
        let arch2 = ArchSpec {
            enc_in: 2,
            ..ArchSpec::default()
        };
        assert_eq!(full_layout(&arch2).total, 34_708 + 28);
    }

    #[test]
    fn layout_hash_distinguishes_layouts() {
        let a = full_layout(&ArchSpec::default());
        let b = full_layout(&ArchSpec {
            enc_in: 2,
            ..ArchSpec::default()
        });
        let c = mlp_layout(&ArchSpec::default(), "theta0");
        assert_ne!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.hash(), full_layout(&ArchSpec::default()).hash());
    }

    #[test]
    fn init_is_deterministic_glorot_with_zero_biases() {
        let arch = ArchSpec::miniature();
        let layout = full_layout(&arch);
        let p1 = init_params(&layout, 11);
        let p2 = init_params(&layout, 11);
        assert_eq!(p1, p2);
        let p3 = init_params(&layout, 12);
        assert_ne!(p1, p3);
        for block in &layout.blocks {
            let slice = &p1[block.offset..block.offset + block.len()];
            if block.shape.len() == 2 {
                let limit = (6.0 / (block.shape[0] + block.shape[1]) as f64).sqrt();
                assert!(slice.iter().all(|v| v.abs() < limit));
                assert!(slice.iter().any(|v| *v != 0.0));
            } else {
                // biases, bias-transform, and the log-variance head bias
                assert!(slice.iter().all(|v| *v == 0.0), "{}", block.name);
            }
        }
    }

    #[test]
    fn shared_block_prefix_gets_identical_draws() {
        // θ_base inside the full layout and a standalone task-net vector
        // (as a plain-initialization baseline uses) agree bit for bit.
        let arch = ArchSpec::miniature();
        let full = init_params(&full_layout(&arch), 99);
        let solo = init_params(&mlp_layout(&arch, "theta0"), 99);
        assert_eq!(&full[..solo.len()], &solo[..]);
    }

    #[test]
    fn mlp_forward_hand_example() {
        // 1 input + 1-wide bias transform, hidden [2], linear out.
        let arch = ArchSpec {
            hidden: vec![2],
            bt_dim: 1,
            d_z: 2,
            dec_hidden: 2,
            enc_in: 1,
        };
        let layout = mlp_layout(&arch, "net");
        assert_eq!(layout.total, 2 * 2 + 2 + 1 * 2 + 1 + 1);
        // [W0 (2,2) row-major, b0 (2), W1 (1,2), b1 (1), bt (1)]
        let lam = vec![1.0, 0.0, 0.0, 2.0, 0.1, -0.1, 1.0, 1.0, 0.25, 0.5];
        let mut tape = Tape::new(false);
        let beta = ParamNodes::input(&mut tape, &layout, &lam).unwrap();
        let tp = TaskParams::from_blocks(&beta, "net").unwrap();
        let x = tape.constant(Tensor::new(vec![1, 1], vec![1.0]).unwrap());
        let y = mlp_forward(&mut tape, &tp, x).unwrap();
        // x_aug=[1,0.5] → pre=[1.1,0.9] → relu → out=1.1+0.9+0.25
        assert_eq!(tape.value(y).shape(), &[1, 1]);
        assert!((tape.value(y).data()[0] - 2.25).abs() < 1e-12);
    }

    #[test]
    fn mlp_forward_gradcheck() {
        let arch = ArchSpec {
            hidden: vec![3, 2],
            bt_dim: 2,
            d_z: 2,
            dec_hidden: 2,
            enc_in: 1,
        };
        let layout = mlp_layout(&arch, "net");
        let mut rng = rng::Stream::new(5);
        let lam0 = Tensor::vector((0..layout.total).map(|_| rng.uniform(-0.7, 0.7)).collect());
        let xs = Tensor::new(vec![4, 1], vec![-1.0, -0.2, 0.4, 1.3]).unwrap();

        let mut loss = |lam: &Tensor| -> crate::Result<f64> {
            let mut tape = Tape::new(false);
            let beta = ParamNodes::input(&mut tape, &layout, lam.data())?;
            let tp = TaskParams::from_blocks(&beta, "net")?;
            let x = tape.constant(xs.clone());
            let y = mlp_forward(&mut tape, &tp, x)?;
            let sq = tape.square(y)?;
            let s = tape.sum(sq)?;
            Ok(tape.value(s).data()[0])
        };
        let fd = finite_difference_grad(&mut loss, &lam0, 1e-6).unwrap();

        let mut tape = Tape::new(false);
        let beta = ParamNodes::input(&mut tape, &layout, lam0.data()).unwrap();
        let tp = TaskParams::from_blocks(&beta, "net").unwrap();
        let x = tape.constant(xs.clone());
        let y = mlp_forward(&mut tape, &tp, x).unwrap();
        let sq = tape.square(y).unwrap();
        let s = tape.sum(sq).unwrap();
        let g = flat_grad(&mut tape, s, &beta);
        let rel = relative_error(&g, fd.data());
        assert!(rel < 1e-6, "rel err {rel:.3e}");
    }

    #[test]
    fn encoder_is_exactly_permutation_invariant() {
        for enc_in in [1usize, 2] {
            let arch = ArchSpec {
                enc_in,
                ..ArchSpec::miniature()
            };
            let layout = full_layout(&arch);
            let beta = {
                let mut v = init_params(&layout, 7);
                // make biases nonzero so the scan isn't trivially symmetric
                let mut s = rng::Stream::new(3);
                for x in &mut v {
                    if *x == 0.0 {
                        *x = s.uniform(-0.3, 0.3);
                    }
                }
                Tensor::vector(v)
            };
            let xs = [0.5, -1.2, 2.0, 0.1, -0.6];
            let ys = [1.0, 0.3, -0.4, 2.2, 0.9];
            let perm_x = [2.0, 0.5, -0.6, -1.2, 0.1];
            let perm_y = [-0.4, 1.0, 0.9, 0.3, 2.2];

            let run = |xs: &[f64], ys: &[f64]| {
                let mut tape = Tape::new(false);
                let pn = ParamNodes::input(&mut tape, &layout, beta.data()).unwrap();
                let post = encode_support(&mut tape, &pn, &arch, xs, ys).unwrap();
                (
                    tape.value(post.mu).data().to_vec(),
                    tape.value(post.sigma).data().to_vec(),
                )
            };
            let (mu1, s1) = run(&xs, &ys);
            let (mu2, s2) = run(&perm_x, &perm_y);
            assert_eq!(mu1, mu2, "enc_in={enc_in}");
            assert_eq!(s1, s2, "enc_in={enc_in}");
            assert!(s1.iter().all(|&s| s > 0.0));
        }
    }

    #[test]
    fn encoder_gradcheck() {
        let arch = ArchSpec::miniature();
        let layout = full_layout(&arch);
        let mut r = rng::Stream::new(21);
        let beta0 = Tensor::vector((0..layout.total).map(|_| r.uniform(-0.5, 0.5)).collect());
        let xs = [0.4, -0.9, 1.5];
        let ys = [0.1, 0.1, 0.1];

        let mut loss = |b: &Tensor| -> crate::Result<f64> {
            let mut tape = Tape::new(false);
            let pn = ParamNodes::input(&mut tape, &layout, b.data())?;
            let post = encode_support(&mut tape, &pn, &arch, &xs, &ys)?;
            let sm = tape.sum(post.mu)?;
            let ss = tape.sum(post.sigma)?;
            let t = tape.add(sm, ss)?;
            Ok(tape.value(t).data()[0])
        };
        let fd = finite_difference_grad(&mut loss, &beta0, 1e-6).unwrap();

        let mut tape = Tape::new(false);
        let pn = ParamNodes::input(&mut tape, &layout, beta0.data()).unwrap();
        let post = encode_support(&mut tape, &pn, &arch, &xs, &ys).unwrap();
        let sm = tape.sum(post.mu).unwrap();
        let ss = tape.sum(post.sigma).unwrap();
        let t = tape.add(sm, ss).unwrap();
        let g = flat_grad(&mut tape, t, &pn);
        let rel = relative_error(&g, fd.data());
        assert!(rel < 1e-6, "rel err {rel:.3e}");
    }

    #[test]
    fn decoder_standard_normal_anchor_and_gradcheck() {
        let arch = ArchSpec::miniature();
        let layout = full_layout(&arch);
        // all-zero parameters → decoder outputs mean 0, logvar 0 → σ=1
        let beta0 = vec![0.0; layout.total];
        let mut tape = Tape::new(false);
        let pn = ParamNodes::input(&mut tape, &layout, &beta0).unwrap();
        let z = tape.constant(Tensor::zeros(&[1, arch.d_z]));
        let ll = decode_covariate_loglik(&mut tape, &pn, z, &[0.0, 1.0]).unwrap();
        let expect = -0.9189385332046727 + -1.4189385332046727;
        assert!((tape.value(ll).data()[0] - expect).abs() < 1e-12);

        // gradcheck at a generic point
        let mut r = rng::Stream::new(33);
        let beta1 = Tensor::vector((0..layout.total).map(|_| r.uniform(-0.4, 0.4)).collect());
        let zval = Tensor::new(
            vec![1, arch.d_z],
            (0..arch.d_z).map(|_| r.uniform(-1.0, 1.0)).collect(),
        )
        .unwrap();
        let xs = [0.2, -0.7, 1.1];
        let mut loss = |b: &Tensor| -> crate::Result<f64> {
            let mut tape = Tape::new(false);
            let pn = ParamNodes::input(&mut tape, &layout, b.data())?;
            let z = tape.constant(zval.clone());
            let ll = decode_covariate_loglik(&mut tape, &pn, z, &xs)?;
            Ok(tape.value(ll).data()[0])
        };
        let fd = finite_difference_grad(&mut loss, &beta1, 1e-6).unwrap();
        let mut tape = Tape::new(false);
        let pn = ParamNodes::input(&mut tape, &layout, beta1.data()).unwrap();
        let z = tape.constant(zval.clone());
        let ll = decode_covariate_loglik(&mut tape, &pn, z, &xs).unwrap();
        let g = flat_grad(&mut tape, ll, &pn);
        let rel = relative_error(&g, fd.data());
        assert!(rel < 1e-6, "rel err {rel:.3e}");
    }

    #[test]
    fn zero_gate_maps_halve_theta_base_exactly() {
        let arch = ArchSpec::miniature();
        let layout = full_layout(&arch);
        let mut params = init_params(&layout, 4);
        // zero the gate maps; any z then yields sigmoid(0)=0.5 exactly
        for b in &layout.blocks {
            if b.name.starts_with("gates.") {
                params[b.offset..b.offset + b.len()].fill(0.0);
            }
        }
        let theta: Vec<f64> = params[..mlp_layout(&arch, "x").total].to_vec();

        let mut tape = Tape::new(false);
        let pn = ParamNodes::input(&mut tape, &layout, &params).unwrap();
        let z = tape.constant(Tensor::new(vec![1, arch.d_z], vec![0.7; arch.d_z]).unwrap());
        let lam = init_from_latent(&mut tape, &pn, &arch, z, false).unwrap();
        let lam_v = lam.flat_value(&tape);
        assert_eq!(lam_v.len(), theta.len());
        let bt_off = theta.len() - arch.bt_dim;
        for i in 0..bt_off {
            assert_eq!(lam_v[i].to_bits(), (0.5 * theta[i]).to_bits(), "elem {i}");
        }
        for i in bt_off..theta.len() {
            assert_eq!(lam_v[i].to_bits(), theta[i].to_bits(), "bt elem {i}");
        }
    }

    #[test]
    fn gates_shrink_but_never_flip_theta_base() {
        let arch = ArchSpec::miniature();
        let layout = full_layout(&arch);
        let mut r = rng::Stream::new(6);
        let params: Vec<f64> = (0..layout.total).map(|_| r.uniform(-1.0, 1.0)).collect();
        let theta: Vec<f64> = params[..mlp_layout(&arch, "x").total].to_vec();
        let mut tape = Tape::new(false);
        let pn = ParamNodes::input(&mut tape, &layout, &params).unwrap();
        let z = tape.constant(Tensor::new(
            vec![1, arch.d_z],
            (0..arch.d_z).map(|_| r.normal()).collect(),
        )
        .unwrap());
        let lam = init_from_latent(&mut tape, &pn, &arch, z, false).unwrap();
        let lam_v = lam.flat_value(&tape);
        let bt_off = theta.len() - arch.bt_dim;
        for i in 0..bt_off {
            assert!(lam_v[i].abs() <= theta[i].abs(), "elem {i}");
            assert!(lam_v[i] * theta[i] >= 0.0, "sign flipped at {i}");
        }
    }

    #[test]
    fn bypass_returns_theta_base_bitwise() {
        let arch = ArchSpec::miniature();
        let layout = full_layout(&arch);
        let params = init_params(&layout, 8);
        let theta: Vec<f64> = params[..mlp_layout(&arch, "x").total].to_vec();
        let mut tape = Tape::new(false);
        let pn = ParamNodes::input(&mut tape, &layout, &params).unwrap();
        let z = tape.constant(Tensor::zeros(&[1, arch.d_z]));
        let lam = init_from_latent(&mut tape, &pn, &arch, z, true).unwrap();
        assert_eq!(lam.flat_value(&tape), theta);
    }

    #[test]
    fn init_from_latent_gradcheck() {
        let arch = ArchSpec::miniature();
        let layout = full_layout(&arch);
        let mut r = rng::Stream::new(100);
        let beta0 = Tensor::vector((0..layout.total).map(|_| r.uniform(-0.6, 0.6)).collect());
        let zval = Tensor::new(
            vec![1, arch.d_z],
            (0..arch.d_z).map(|_| r.uniform(-1.5, 1.5)).collect(),
        )
        .unwrap();
        // weight λ elements unevenly so the check exercises every block
        let weights: Vec<f64> = (0..mlp_layout(&arch, "x").total)
            .map(|i| ((i % 7) as f64 - 3.0) / 3.0)
            .collect();

        let mut loss = |b: &Tensor| -> crate::Result<f64> {
            let mut tape = Tape::new(false);
            let pn = ParamNodes::input(&mut tape, &layout, b.data())?;
            let z = tape.constant(zval.clone());
            let lam = init_from_latent(&mut tape, &pn, &arch, z, false)?;
            let lam_flat = flatten_task_params(&mut tape, &lam);
            let w = tape.constant(Tensor::vector(weights.clone()));
            let prod = tape.mul(lam_flat, w)?;
            let s = tape.sum(prod)?;
            Ok(tape.value(s).data()[0])
        };
        let fd = finite_difference_grad(&mut loss, &beta0, 1e-6).unwrap();

        let mut tape = Tape::new(false);
        let pn = ParamNodes::input(&mut tape, &layout, beta0.data()).unwrap();
        let z = tape.constant(zval.clone());
        let lam = init_from_latent(&mut tape, &pn, &arch, z, false).unwrap();
        let lam_flat = flatten_task_params(&mut tape, &lam);
        let w = tape.constant(Tensor::vector(weights.clone()));
        let prod = tape.mul(lam_flat, w).unwrap();
        let s = tape.sum(prod).unwrap();
        let g = flat_grad(&mut tape, s, &pn);
        let rel = relative_error(&g, fd.data());
        assert!(rel < 1e-6, "rel err {rel:.3e}");
    }

    #[test]
    fn reparameterize_matches_formula() {
        let arch = ArchSpec::miniature();
        let layout = full_layout(&arch);
        let mut r = rng::Stream::new(55);
        let beta: Vec<f64> = (0..layout.total).map(|_| r.uniform(-0.5, 0.5)).collect();
        let mut tape = Tape::new(false);
        let pn = ParamNodes::input(&mut tape, &layout, &beta).unwrap();
        let post = encode_support(&mut tape, &pn, &arch, &[0.3, -0.8], &[0.0, 0.0]).unwrap();
        let eps = Tensor::new(vec![1, arch.d_z], vec![0.5, -1.0, 2.0, 0.0]).unwrap();
        let z = reparameterize(&mut tape, &post, &eps).unwrap();
        let mu = tape.value(post.mu).data().to_vec();
        let sg = tape.value(post.sigma).data().to_vec();
        let zv = tape.value(z).data();
        for i in 0..arch.d_z {
            assert_eq!(zv[i].to_bits(), (mu[i] + sg[i] * eps.data()[i]).to_bits());
        }
    }
}
