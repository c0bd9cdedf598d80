//! The aggregation network (`Agg`) and the target-only inference network
//! (`Infer`).
//!
//! `Agg` runs three serially concatenated blocks, each evaluating the three
//! weight-sharing wirings over a (source, target) token pair, followed by a
//! shared unpatch projection and a shared conv head (Conv3×3+BN+ReLU twice,
//! then Conv3×3+Sigmoid). Block i+1 consumes (p_s, p_t) of block i; the
//! polymerized output p_p feeds only the bridge loss.
//!
//! `Infer` is built by value-copying a trained `Agg`: same parameter store
//! content, but its forward path wires only the target branch.

use indexmap::IndexMap;
use rand::Rng;

use crate::attention::{self, BlockVars, BranchOutputs, EmbedderVars};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// The architecture always stacks three blocks.
pub const NUM_BLOCKS: usize = 3;
/// Feed-forward hidden width multiplier.
pub const FFN_MULT: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Shape hyperparameters of both networks.
#[derive(Debug, Clone, PartialEq)]
pub struct NetConfig {
    pub img_h: usize,
    pub img_w: usize,
    pub patch: usize,
    pub in_channels: usize,
    pub embed_dim: usize,
    pub heads: usize,
    /// Channels of the per-token tile produced by the unpatch projection.
    pub tile_channels: usize,
    /// Width of the two hidden conv layers (the head is width→width→1).
    pub head_width: usize,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl NetConfig {
    /// Desk-scale defaults: 32×32 slices, patch 8, d=32, 4 heads.
    pub fn desk() -> Self {
        NetConfig {
            img_h: 32,
            img_w: 32,
            patch: 8,
            in_channels: 3,
            embed_dim: 32,
            heads: 4,
            tile_channels: 1,
            head_width: 16,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }

    pub fn tokens(&self) -> usize {
        (self.img_h / self.patch) * (self.img_w / self.patch)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.img_h % self.patch != 0 || self.img_w % self.patch != 0 {
            return Err(Error::Config(format!(
                "image {}×{} not divisible by patch {}",
                self.img_h, self.img_w, self.patch
            )));
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embed dim {} not divisible by {} heads",
                self.embed_dim, self.heads
            )));
        }
        if self.in_channels == 0 || self.tile_channels == 0 || self.head_width == 0 {
            return Err(Error::Config("zero channel width".into()));
        }
        Ok(())
    }
}

/// Named parameter tensors in a fixed iteration order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: IndexMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, t: Tensor) -> Result<()> {
        if self.entries.insert(name.to_string(), t).is_some() {
            return Err(Error::Internal(format!("duplicate parameter '{name}'")));
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Internal(format!("unknown parameter '{name}'")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::Internal(format!("unknown parameter '{name}'")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.keys().map(|k| k.as_str()).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_elements(&self) -> usize {
        self.entries.values().map(|t| t.numel()).sum()
    }

    /// Bit-level equality of every parameter (NaN-safe).
    pub fn bitwise_eq(&self, other: &ParamStore) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().all(|(name, t)| {
                other.entries.get(name).is_some_and(|o| {
                    o.shape() == t.shape()
                        && o.data()
                            .iter()
                            .zip(t.data())
                            .all(|(a, b)| a.to_bits() == b.to_bits())
                })
            })
    }

    /// Concatenate all parameters into one flat tensor (iteration order).
    pub fn flatten(&self) -> Tensor {
        let mut data = Vec::with_capacity(self.total_elements());
        for t in self.entries.values() {
            data.extend_from_slice(t.data());
        }
        Tensor::new(&[data.len()], data).unwrap()
    }

    /// Overwrite every parameter from a flat buffer laid out like
    /// [`ParamStore::flatten`].
    pub fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.total_elements() {
            return Err(Error::Dimension(format!(
                "flat buffer has {} elements, store holds {}",
                flat.len(),
                self.total_elements()
            )));
        }
        let mut off = 0;
        for t in self.entries.values_mut() {
            let n = t.numel();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }
}

/// Running batch-norm statistics, keyed by layer name.
#[derive(Debug, Clone, Default)]
pub struct BnBuffers {
    entries: IndexMap<String, (Vec<f64>, Vec<f64>)>,
}

impl BnBuffers {
    pub fn insert(&mut self, name: &str, channels: usize) {
        self.entries
            .insert(name.to_string(), (vec![0.0; channels], vec![1.0; channels]));
    }

    pub fn get(&self, name: &str) -> Result<(&[f64], &[f64])> {
        self.entries
            .get(name)
            .map(|(m, v)| (m.as_slice(), v.as_slice()))
            .ok_or_else(|| Error::Internal(format!("unknown bn buffer '{name}'")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &(Vec<f64>, Vec<f64>))> {
        self.entries.iter()
    }

    pub fn set(&mut self, name: &str, mean: Vec<f64>, var: Vec<f64>) {
        self.entries.insert(name.to_string(), (mean, var));
    }

    /// `running = (1 − momentum)·running + momentum·batch`.
    pub fn apply_updates(&mut self, updates: &[BnUpdate], momentum: f64) -> Result<()> {
        for u in updates {
            let (m, v) = self
                .entries
                .get_mut(&u.name)
                .ok_or_else(|| Error::Internal(format!("unknown bn buffer '{}'", u.name)))?;
            for (r, b) in m.iter_mut().zip(&u.mean) {
                *r = (1.0 - momentum) * *r + momentum * b;
            }
            for (r, b) in v.iter_mut().zip(&u.var) {
                *r = (1.0 - momentum) * *r + momentum * b;
            }
        }
        Ok(())
    }

    pub fn bitwise_eq(&self, other: &BnBuffers) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().all(|(name, (m, v))| {
                other.entries.get(name).is_some_and(|(om, ov)| {
                    m.iter().zip(om).all(|(a, b)| a.to_bits() == b.to_bits())
                        && v.iter().zip(ov).all(|(a, b)| a.to_bits() == b.to_bits())
                })
            })
    }
}

/// Batch statistics recorded by one training-mode BN call.
#[derive(Debug, Clone)]
pub struct BnUpdate {
    pub name: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

fn xavier<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-limit..limit)).collect();
    Tensor::new(&[rows, cols], data).unwrap()
}

fn conv_kernel<R: Rng>(rng: &mut R, cout: usize, cin: usize) -> Tensor {
    let limit = (6.0 / ((cin + cout) * 9) as f64).sqrt();
    let data = (0..cout * cin * 9).map(|_| rng.gen_range(-limit..limit)).collect();
    Tensor::new(&[cout, cin, 3, 3], data).unwrap()
}

/// Create the single parameter store both networks are built from, plus the
/// BN running buffers. Creation order is fixed, so equal seeds give
/// bit-identical stores.
pub fn init_params<R: Rng>(cfg: &NetConfig, rng: &mut R) -> Result<(ParamStore, BnBuffers)> {
    cfg.validate()?;
    let d = cfg.embed_dim;
    let n = cfg.tokens();
    let patch_elems = cfg.in_channels * cfg.patch * cfg.patch;
    let tile = cfg.tile_channels * cfg.patch * cfg.patch;
    let hw = cfg.head_width;

    let mut p = ParamStore::new();
    p.insert("embed.proj_w", xavier(rng, patch_elems, d))?;
    p.insert("embed.proj_b", Tensor::zeros(&[d]))?;
    {
        let data = (0..n * d).map(|_| rng.gen_range(-0.02..0.02)).collect();
        p.insert("embed.pos", Tensor::new(&[n, d], data)?)?;
    }
    for b in 0..NUM_BLOCKS {
        p.insert(&format!("block{b}.w_q"), xavier(rng, d, d))?;
        p.insert(&format!("block{b}.w_k"), xavier(rng, d, d))?;
        p.insert(&format!("block{b}.w_v"), xavier(rng, d, d))?;
        p.insert(&format!("block{b}.w_o"), xavier(rng, d, d))?;
        p.insert(&format!("block{b}.ln1_gamma"), Tensor::filled(&[d], 1.0))?;
        p.insert(&format!("block{b}.ln1_beta"), Tensor::zeros(&[d]))?;
        p.insert(&format!("block{b}.ln2_gamma"), Tensor::filled(&[d], 1.0))?;
        p.insert(&format!("block{b}.ln2_beta"), Tensor::zeros(&[d]))?;
        p.insert(&format!("block{b}.ffn_w1"), xavier(rng, d, FFN_MULT * d))?;
        p.insert(&format!("block{b}.ffn_b1"), Tensor::zeros(&[FFN_MULT * d]))?;
        p.insert(&format!("block{b}.ffn_w2"), xavier(rng, FFN_MULT * d, d))?;
        p.insert(&format!("block{b}.ffn_b2"), Tensor::zeros(&[d]))?;
    }
    p.insert("unpatch.w", xavier(rng, d, tile))?;
    p.insert("unpatch.b", Tensor::zeros(&[tile]))?;
    p.insert("head.conv1.w", conv_kernel(rng, hw, cfg.tile_channels))?;
    p.insert("head.conv1.b", Tensor::zeros(&[hw]))?;
    p.insert("head.bn1.gamma", Tensor::filled(&[hw], 1.0))?;
    p.insert("head.bn1.beta", Tensor::zeros(&[hw]))?;
    p.insert("head.conv2.w", conv_kernel(rng, hw, hw))?;
    p.insert("head.conv2.b", Tensor::zeros(&[hw]))?;
    p.insert("head.bn2.gamma", Tensor::filled(&[hw], 1.0))?;
    p.insert("head.bn2.beta", Tensor::zeros(&[hw]))?;
    p.insert("head.conv3.w", conv_kernel(rng, 1, hw))?;
    p.insert("head.conv3.b", Tensor::zeros(&[1]))?;

    let mut buffers = BnBuffers::default();
    buffers.insert("head.bn1", hw);
    buffers.insert("head.bn2", hw);
    Ok((p, buffers))
}

/// Graph handles for every parameter of one bound store.
pub struct NetVars {
    vars: IndexMap<String, Var>,
    heads: usize,
}

impl NetVars {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Internal(format!("unbound parameter '{name}'")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn embedder(&self) -> Result<EmbedderVars> {
        Ok(EmbedderVars {
            proj_w: self.var("embed.proj_w")?,
            proj_b: self.var("embed.proj_b")?,
            pos: self.var("embed.pos")?,
        })
    }

    pub fn block(&self, b: usize) -> Result<BlockVars> {
        Ok(BlockVars {
            w_q: self.var(&format!("block{b}.w_q"))?,
            w_k: self.var(&format!("block{b}.w_k"))?,
            w_v: self.var(&format!("block{b}.w_v"))?,
            w_o: self.var(&format!("block{b}.w_o"))?,
            ln1_gamma: self.var(&format!("block{b}.ln1_gamma"))?,
            ln1_beta: self.var(&format!("block{b}.ln1_beta"))?,
            ln2_gamma: self.var(&format!("block{b}.ln2_gamma"))?,
            ln2_beta: self.var(&format!("block{b}.ln2_beta"))?,
            ffn_w1: self.var(&format!("block{b}.ffn_w1"))?,
            ffn_b1: self.var(&format!("block{b}.ffn_b1"))?,
            ffn_w2: self.var(&format!("block{b}.ffn_w2"))?,
            ffn_b2: self.var(&format!("block{b}.ffn_b2"))?,
            heads: self.heads,
        })
    }
}

/// Bind a parameter store into a graph as gradient leaves (for training).
pub fn bind(g: &mut Graph, params: &ParamStore, cfg: &NetConfig) -> NetVars {
    let vars = params
        .iter()
        .map(|(name, t)| (name.clone(), g.leaf(t.clone())))
        .collect();
    NetVars {
        vars,
        heads: cfg.heads,
    }
}

/// Bind a parameter store as constants (frozen teacher, evaluation).
pub fn bind_frozen(g: &mut Graph, params: &ParamStore, cfg: &NetConfig) -> NetVars {
    let vars = params
        .iter()
        .map(|(name, t)| (name.clone(), g.constant(t.clone())))
        .collect();
    NetVars {
        vars,
        heads: cfg.heads,
    }
}

/// Three branch handles of one block for one sample; `p_p` is absent when
/// the polymerized branch is disabled (ablation rows without MCA).
#[derive(Debug, Clone, Copy)]
pub struct BlockBranches {
    pub p_s: Var,
    pub p_t: Var,
    pub p_p: Option<Var>,
}

impl BlockBranches {
    pub fn branch_outputs(&self) -> Option<BranchOutputs> {
        self.p_p.map(|p_p| BranchOutputs {
            p_s: self.p_s,
            p_t: self.p_t,
            p_p,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AggOptions {
    /// Evaluate the cross-attention wiring (rows b..e of the ablation).
    pub use_polymerized: bool,
}

impl Default for AggOptions {
    fn default() -> Self {
        AggOptions {
            use_polymerized: true,
        }
    }
}

/// Everything the Agg forward pass produces for one batch.
pub struct AggForward {
    /// B×1×H×W source-domain dose maps, strictly inside (0, 1).
    pub dose_s: Var,
    /// B×1×H×W target-domain dose maps.
    pub dose_t: Var,
    /// `per_block[block][sample]` branch handles.
    pub per_block: Vec<Vec<BlockBranches>>,
    /// Batch statistics to fold into the running BN buffers (training mode).
    pub bn_updates: Vec<BnUpdate>,
}

pub struct TargetForward {
    pub dose_t: Var,
    pub bn_updates: Vec<BnUpdate>,
}

fn unpatch_tokens(g: &mut Graph, vars: &NetVars, cfg: &NetConfig, tokens: Var) -> Result<Var> {
    let projected = g.matmul(tokens, vars.var("unpatch.w")?)?;
    let tiled = g.add_row(projected, vars.var("unpatch.b")?)?;
    g.tile_patches(tiled, cfg.patch, cfg.tile_channels, cfg.img_h, cfg.img_w)
}

fn conv_head(
    g: &mut Graph,
    vars: &NetVars,
    cfg: &NetConfig,
    x: Var,
    mode: Mode,
    buffers: &BnBuffers,
    updates: &mut Vec<BnUpdate>,
) -> Result<Var> {
    let mut h = x;
    for (conv, bn) in [("head.conv1", "head.bn1"), ("head.conv2", "head.bn2")] {
        let w = vars.var(&format!("{conv}.w"))?;
        let b = vars.var(&format!("{conv}.b"))?;
        h = g.conv3x3(h, w, b)?;
        let gamma = vars.var(&format!("{bn}.gamma"))?;
        let beta = vars.var(&format!("{bn}.beta"))?;
        h = match mode {
            Mode::Train => {
                let out = g.batch_norm_train(h, gamma, beta, cfg.bn_eps)?;
                let (mean, var) = g
                    .bn_batch_stats(out)
                    .ok_or_else(|| Error::Internal("missing bn batch stats".into()))?;
                updates.push(BnUpdate {
                    name: bn.to_string(),
                    mean: mean.to_vec(),
                    var: var.to_vec(),
                });
                out
            }
            Mode::Eval => {
                let (mean, var) = buffers.get(bn)?;
                g.batch_norm_eval(h, gamma, beta, mean, var, cfg.bn_eps)?
            }
        };
        h = g.relu(h)?;
    }
    let w = vars.var("head.conv3.w")?;
    let b = vars.var("head.conv3.b")?;
    h = g.conv3x3(h, w, b)?;
    g.sigmoid(h)
}

fn check_input_shape(cfg: &NetConfig, x: &Tensor) -> Result<()> {
    let want = [cfg.in_channels, cfg.img_h, cfg.img_w];
    if x.shape() != want {
        return Err(Error::Dimension(format!(
            "input shape {:?} does not match configured {:?}",
            x.shape(),
            want
        )));
    }
    Ok(())
}

/// Batched Agg forward: one (source, target) pair per batch index. Tokens
/// flow p_s → next block's source input and p_t → next block's target input;
/// the final p_s/p_t are unpatched and pushed through the shared conv head
/// (one head, two calls).
#[allow(clippy::too_many_arguments)]
pub fn agg_forward_batch(
    g: &mut Graph,
    vars: &NetVars,
    cfg: &NetConfig,
    xs: &[Tensor],
    xt: &[Tensor],
    mode: Mode,
    buffers: &BnBuffers,
    opts: AggOptions,
) -> Result<AggForward> {
    if xs.is_empty() || xs.len() != xt.len() {
        return Err(Error::Contract(format!(
            "agg_forward_batch: {} source vs {} target samples",
            xs.len(),
            xt.len()
        )));
    }
    let embedder = vars.embedder()?;
    let mut per_block: Vec<Vec<BlockBranches>> = vec![Vec::new(); NUM_BLOCKS];
    let mut maps_s = Vec::with_capacity(xs.len());
    let mut maps_t = Vec::with_capacity(xt.len());

    for (x_s, x_t) in xs.iter().zip(xt) {
        check_input_shape(cfg, x_s)?;
        check_input_shape(cfg, x_t)?;
        let xs_var = g.constant(x_s.clone());
        let xt_var = g.constant(x_t.clone());
        let mut tok_s = attention::embed_patches(g, xs_var, &embedder, cfg.patch)?;
        let mut tok_t = attention::embed_patches(g, xt_var, &embedder, cfg.patch)?;
        for b in 0..NUM_BLOCKS {
            let blk = vars.block(b)?;
            let p_s = attention::msa(g, tok_s, &blk)?;
            let p_t = attention::msa(g, tok_t, &blk)?;
            let p_p = if opts.use_polymerized {
                Some(attention::mca(g, tok_s, tok_t, &blk)?)
            } else {
                None
            };
            per_block[b].push(BlockBranches { p_s, p_t, p_p });
            tok_s = p_s;
            tok_t = p_t;
        }
        maps_s.push(unpatch_tokens(g, vars, cfg, tok_s)?);
        maps_t.push(unpatch_tokens(g, vars, cfg, tok_t)?);
    }

    let batch_s = g.stack(&maps_s)?;
    let batch_t = g.stack(&maps_t)?;
    let mut bn_updates = Vec::new();
    let dose_s = conv_head(g, vars, cfg, batch_s, mode, buffers, &mut bn_updates)?;
    let dose_t = conv_head(g, vars, cfg, batch_t, mode, buffers, &mut bn_updates)?;
    Ok(AggForward {
        dose_s,
        dose_t,
        per_block,
        bn_updates,
    })
}

/// Target-branch-only forward: embed → three self-attention blocks →
/// unpatch → conv head. This is both the Infer forward and the Agg teacher
/// path (feeding the same input to both Agg streams collapses all branches
/// onto exactly this computation).
pub fn target_forward_batch(
    g: &mut Graph,
    vars: &NetVars,
    cfg: &NetConfig,
    xt: &[Tensor],
    mode: Mode,
    buffers: &BnBuffers,
) -> Result<TargetForward> {
    if xt.is_empty() {
        return Err(Error::Contract("target_forward_batch: empty batch".into()));
    }
    let embedder = vars.embedder()?;
    let mut maps = Vec::with_capacity(xt.len());
    for x in xt {
        check_input_shape(cfg, x)?;
        let xv = g.constant(x.clone());
        let mut tok = attention::embed_patches(g, xv, &embedder, cfg.patch)?;
        for b in 0..NUM_BLOCKS {
            let blk = vars.block(b)?;
            tok = attention::msa(g, tok, &blk)?;
        }
        maps.push(unpatch_tokens(g, vars, cfg, tok)?);
    }
    let batch = g.stack(&maps)?;
    let mut bn_updates = Vec::new();
    let dose_t = conv_head(g, vars, cfg, batch, mode, buffers, &mut bn_updates)?;
    Ok(TargetForward { dose_t, bn_updates })
}

/// Pull sample `i` of a B×1×H×W batch var out as a 1×H×W tensor.
pub fn batch_sample(g: &Graph, batch: Var, i: usize) -> Result<Tensor> {
    let t = g.value(batch);
    let s = t.shape();
    if s.len() != 4 {
        return Err(Error::Dimension(format!("expected rank-4 batch, got {s:?}")));
    }
    let slab = s[1] * s[2] * s[3];
    Tensor::new(&[s[1], s[2], s[3]], t.data()[i * slab..(i + 1) * slab].to_vec())
}

#[derive(Debug, Clone)]
pub struct AggNetwork {
    pub cfg: NetConfig,
    pub params: ParamStore,
    pub buffers: BnBuffers,
}

impl AggNetwork {
    pub fn init<R: Rng>(cfg: NetConfig, rng: &mut R) -> Result<Self> {
        let (params, buffers) = init_params(&cfg, rng)?;
        Ok(AggNetwork {
            cfg,
            params,
            buffers,
        })
    }

    /// Evaluation-mode prediction pair for one (source, target) input.
    pub fn predict_pair(&self, x_s: &Tensor, x_t: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let vars = bind_frozen(&mut g, &self.params, &self.cfg);
        let out = agg_forward_batch(
            &mut g,
            &vars,
            &self.cfg,
            std::slice::from_ref(x_s),
            std::slice::from_ref(x_t),
            Mode::Eval,
            &self.buffers,
            AggOptions::default(),
        )?;
        Ok((
            batch_sample(&g, out.dose_s, 0)?,
            batch_sample(&g, out.dose_t, 0)?,
        ))
    }

    /// Evaluation-mode teacher output ŷ_t^A for one target input.
    pub fn predict_target(&self, x_t: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = bind_frozen(&mut g, &self.params, &self.cfg);
        let out = target_forward_batch(
            &mut g,
            &vars,
            &self.cfg,
            std::slice::from_ref(x_t),
            Mode::Eval,
            &self.buffers,
        )?;
        batch_sample(&g, out.dose_t, 0)
    }
}

#[derive(Debug, Clone)]
pub struct InferNetwork {
    pub cfg: NetConfig,
    pub params: ParamStore,
    pub buffers: BnBuffers,
}

impl InferNetwork {
    /// Fresh (non-initialized-from-Agg) network for the from-scratch
    /// ablation row.
    pub fn init<R: Rng>(cfg: NetConfig, rng: &mut R) -> Result<Self> {
        let (params, buffers) = init_params(&cfg, rng)?;
        Ok(InferNetwork {
            cfg,
            params,
            buffers,
        })
    }

    /// Evaluation-mode prediction for one target input.
    pub fn predict(&self, x_t: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = bind_frozen(&mut g, &self.params, &self.cfg);
        let out = target_forward_batch(
            &mut g,
            &vars,
            &self.cfg,
            std::slice::from_ref(x_t),
            Mode::Eval,
            &self.buffers,
        )?;
        batch_sample(&g, out.dose_t, 0)
    }
}

/// Deep value copy: subsequent Infer updates never touch the Agg store.
pub fn build_infer_from_agg(net: &AggNetwork) -> InferNetwork {
    InferNetwork {
        cfg: net.cfg.clone(),
        params: net.params.clone(),
        buffers: net.buffers.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> NetConfig {
        NetConfig {
            img_h: 16,
            img_w: 16,
            patch: 4,
            embed_dim: 8,
            heads: 2,
            ..NetConfig::desk()
        }
    }

    fn rand_input(rng: &mut ChaCha8Rng, cfg: &NetConfig) -> Tensor {
        let n = cfg.in_channels * cfg.img_h * cfg.img_w;
        Tensor::new(
            &[cfg.in_channels, cfg.img_h, cfg.img_w],
            (0..n).map(|_| rng.gen_range(0.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn collapsed_domains_give_identical_outputs_and_branches() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = AggNetwork::init(cfg.clone(), &mut rng).unwrap();
        let x = rand_input(&mut rng, &cfg);

        let mut g = Graph::new();
        let vars = bind_frozen(&mut g, &net.params, &cfg);
        let out = agg_forward_batch(
            &mut g,
            &vars,
            &cfg,
            &[x.clone()],
            &[x],
            Mode::Train,
            &net.buffers,
            AggOptions::default(),
        )
        .unwrap();
        assert_eq!(g.value(out.dose_s).data(), g.value(out.dose_t).data());
        for block in &out.per_block {
            let b = &block[0];
            assert_eq!(g.value(b.p_s).data(), g.value(b.p_t).data());
            assert_eq!(g.value(b.p_s).data(), g.value(b.p_p.unwrap()).data());
        }
    }

    #[test]
    fn outputs_strictly_inside_unit_interval() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = AggNetwork::init(cfg.clone(), &mut rng).unwrap();
        let (ys, yt) = net
            .predict_pair(&rand_input(&mut rng, &cfg), &rand_input(&mut rng, &cfg))
            .unwrap();
        for v in ys.data().iter().chain(yt.data()) {
            assert!(*v > 0.0 && *v < 1.0, "dose {v} outside (0,1)");
        }
    }

    #[test]
    fn per_block_outputs_match_manual_composition() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = AggNetwork::init(cfg.clone(), &mut rng).unwrap();
        let xs = rand_input(&mut rng, &cfg);
        let xt = rand_input(&mut rng, &cfg);

        let mut g = Graph::new();
        let vars = bind_frozen(&mut g, &net.params, &cfg);
        let out = agg_forward_batch(
            &mut g,
            &vars,
            &cfg,
            &[xs.clone()],
            &[xt.clone()],
            Mode::Train,
            &net.buffers,
            AggOptions::default(),
        )
        .unwrap();

        // manual block-by-block composition with the same bound vars
        let e = vars.embedder().unwrap();
        let xs_var = g.constant(xs);
        let xt_var = g.constant(xt);
        let mut tok_s = attention::embed_patches(&mut g, xs_var, &e, cfg.patch).unwrap();
        let mut tok_t = attention::embed_patches(&mut g, xt_var, &e, cfg.patch).unwrap();
        for b in 0..NUM_BLOCKS {
            let blk = vars.block(b).unwrap();
            let branches = attention::pfm_forward(&mut g, tok_s, tok_t, &blk).unwrap();
            let got = &out.per_block[b][0];
            assert_eq!(g.value(got.p_s).data(), g.value(branches.p_s).data());
            assert_eq!(g.value(got.p_t).data(), g.value(branches.p_t).data());
            assert_eq!(
                g.value(got.p_p.unwrap()).data(),
                g.value(branches.p_p).data()
            );
            tok_s = branches.p_s;
            tok_t = branches.p_t;
        }
    }

    #[test]
    fn infer_initialization_matches_agg_target_path() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let agg = AggNetwork::init(cfg.clone(), &mut rng).unwrap();
        let infer = build_infer_from_agg(&agg);
        let x = rand_input(&mut rng, &cfg);

        // teacher path of agg == infer prediction at construction
        let teacher = agg.predict_target(&x).unwrap();
        let student = infer.predict(&x).unwrap();
        assert_eq!(teacher.data(), student.data());

        // and both equal the target output of the two-stream forward fed
        // with the same input on both sides
        let (_, yt) = agg.predict_pair(&x, &x).unwrap();
        assert_eq!(teacher.data(), yt.data());
    }

    #[test]
    fn infer_is_isolated_from_agg() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let agg = AggNetwork::init(cfg, &mut rng).unwrap();
        let before = agg.params.clone();
        let mut infer = build_infer_from_agg(&agg);
        infer.params.get_mut("block0.w_q").unwrap().data_mut()[0] += 1.0;
        assert!(agg.params.bitwise_eq(&before));
        assert!(!infer.params.bitwise_eq(&before));
    }

    #[test]
    fn parameter_counts_are_equal_under_weight_sharing() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let agg = AggNetwork::init(cfg, &mut rng).unwrap();
        let infer = build_infer_from_agg(&agg);
        assert_eq!(agg.params.len(), infer.params.len());
        assert_eq!(agg.params.total_elements(), infer.params.total_elements());
        assert_eq!(agg.params.names(), infer.params.names());
    }

    #[test]
    fn store_enumeration_is_single_copy() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (params, _) = init_params(&cfg, &mut rng).unwrap();
        let names = params.names();
        // one q/k/v/o per block; no per-branch suffixes exist
        for b in 0..NUM_BLOCKS {
            let q: Vec<_> = names
                .iter()
                .filter(|n| n.starts_with(&format!("block{b}.")) && n.contains("w_q"))
                .collect();
            assert_eq!(q.len(), 1, "block {b} must own exactly one W_Q");
        }
        assert!(names.iter().all(|n| !n.contains("b_s") && !n.contains("b_t") && !n.contains("b_p")));
        // 3 embed + 12 per block × 3 + 2 unpatch + 10 head
        assert_eq!(names.len(), 3 + 12 * NUM_BLOCKS + 2 + 10);
    }

    #[test]
    fn infer_output_shape_contract() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let infer = InferNetwork::init(cfg.clone(), &mut rng).unwrap();
        let y = infer.predict(&rand_input(&mut rng, &cfg)).unwrap();
        assert_eq!(y.shape(), &[1, cfg.img_h, cfg.img_w]);
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let cfg = small_cfg();
        let a = AggNetwork::init(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = AggNetwork::init(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert!(a.params.bitwise_eq(&b.params));
        let c = AggNetwork::init(cfg, &mut ChaCha8Rng::seed_from_u64(10)).unwrap();
        assert!(!a.params.bitwise_eq(&c.params));
    }

    #[test]
    fn flatten_roundtrip() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (mut params, _) = init_params(&cfg, &mut rng).unwrap();
        let flat = params.flatten();
        let mut modified = flat.data().to_vec();
        modified[0] += 0.5;
        params.load_flat(&modified).unwrap();
        assert_eq!(params.flatten().data(), modified.as_slice());
    }
}
