//! The five network blocks: generator (G), encoder (E), transformer (T),
//! reconstructor (R) and discriminator (D).
//!
//! E, G and every T emit feature maps of identical shape `[n, 4w, h/4, w/4]`
//! (w being the base channel width), so transformer chains of any length and
//! order type-check. The transformer predicts a single-channel mask `g` via
//! tanh, rescales it to `g' = (1+g)/2 in (0,1)` and blends
//! `f_t = g' * f' + (1-g') * f`.

use crate::error::{ModGanError, Result};
use crate::graph::{Graph, NodeId, Scalar};
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use std::collections::HashMap;

/// Named parameter arrays for one block.
#[derive(Debug, Clone)]
pub struct ParamSet<S: Scalar> {
    entries: Vec<(String, ArrayD<S>)>,
    index: HashMap<String, usize>,
}

impl<S: Scalar> Default for ParamSet<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamSet<S> {
    pub fn new() -> Self {
        ParamSet { entries: Vec::new(), index: HashMap::new() }
    }

    pub fn insert(&mut self, name: &str, value: ArrayD<S>) {
        assert!(!self.index.contains_key(name), "duplicate param {name}");
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push((name.to_string(), value));
    }

    pub fn get(&self, name: &str) -> &ArrayD<S> {
        let i = *self.index.get(name).unwrap_or_else(|| panic!("missing param {name}"));
        &self.entries[i].1
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ArrayD<S> {
        let i = *self.index.get(name).unwrap_or_else(|| panic!("missing param {name}"));
        &mut self.entries[i].1
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<S>)> {
        self.entries.iter().map(|(n, v)| (n.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ArrayD<S>)> {
        self.entries.iter_mut().map(|(n, v)| (n.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn value_count(&self) -> usize {
        self.entries.iter().map(|(_, v)| v.len()).sum()
    }

    /// Leaf every parameter into the graph. `trainable` controls whether
    /// gradients flow to them.
    pub fn bind(&self, g: &mut Graph<S>, trainable: bool) -> Binding {
        let mut ids = HashMap::new();
        for (name, value) in &self.entries {
            ids.insert(name.clone(), g.leaf(value.clone(), trainable));
        }
        Binding { ids }
    }
}

/// Parameter name to graph-leaf mapping for one forward pass.
pub struct Binding {
    ids: HashMap<String, NodeId>,
}

impl Binding {
    pub fn get(&self, name: &str) -> NodeId {
        *self.ids.get(name).unwrap_or_else(|| panic!("unbound param {name}"))
    }

    pub fn ids(&self) -> impl Iterator<Item = (&str, NodeId)> {
        self.ids.iter().map(|(n, i)| (n.as_str(), *i))
    }
}

/// Which block a parameter set belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    Generator,
    Encoder,
    Transformer,
    Reconstructor,
    Discriminator,
}

/// Structural hyperparameters shared by all blocks.
#[derive(Debug, Clone, Copy)]
pub struct NetConfig {
    pub image_size: usize,
    /// Base channel width; 64 reproduces the reference architecture
    /// (feature maps of 256 channels), smaller values shrink every layer
    /// proportionally while keeping all shape relations.
    pub base_width: usize,
    pub z_dim: usize,
}

impl NetConfig {
    pub fn new(image_size: usize, base_width: usize, z_dim: usize) -> Self {
        NetConfig { image_size, base_width, z_dim }
    }

    /// Channel count of the shared feature-map interface.
    pub fn feature_channels(&self) -> usize {
        self.base_width * 4
    }

    pub fn feature_size(&self) -> usize {
        self.image_size / 4
    }
}

const LEAKY_SLOPE: f64 = 0.01;
const IN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq)]
enum Act {
    None,
    Relu,
    Leaky,
    Tanh,
}

/// One (optionally transposed) convolution with optional instance norm and
/// activation.
#[derive(Debug, Clone)]
struct ConvSpec {
    name: String,
    in_c: usize,
    out_c: usize,
    k: usize,
    stride: usize,
    pad: usize,
    transposed: bool,
    norm: bool,
    act: Act,
}

impl ConvSpec {
    #[allow(clippy::too_many_arguments)]
    fn new(
        name: &str,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
        transposed: bool,
        norm: bool,
        act: Act,
    ) -> Self {
        ConvSpec {
            name: name.to_string(),
            in_c,
            out_c,
            k,
            stride,
            pad,
            transposed,
            norm,
            act,
        }
    }

    fn init<S: Scalar, R: Rng>(&self, ps: &mut ParamSet<S>, rng: &mut R) {
        let normal = Normal::new(0.0, INIT_STD).unwrap();
        let wshape = if self.transposed {
            [self.in_c, self.out_c, self.k, self.k]
        } else {
            [self.out_c, self.in_c, self.k, self.k]
        };
        let n: usize = wshape.iter().product();
        let data: Vec<S> = (0..n).map(|_| S::from_f64(normal.sample(rng))).collect();
        ps.insert(&format!("{}.w", self.name), ArrayD::from_shape_vec(IxDyn(&wshape), data).unwrap());
        ps.insert(&format!("{}.b", self.name), ArrayD::zeros(IxDyn(&[1, self.out_c, 1, 1])));
        if self.norm {
            ps.insert(
                &format!("{}.gamma", self.name),
                ArrayD::from_elem(IxDyn(&[1, self.out_c, 1, 1]), S::one()),
            );
            ps.insert(&format!("{}.beta", self.name), ArrayD::zeros(IxDyn(&[1, self.out_c, 1, 1])));
        }
    }

    fn forward<S: Scalar>(&self, g: &mut Graph<S>, bind: &Binding, x: NodeId) -> NodeId {
        let w = bind.get(&format!("{}.w", self.name));
        let b = bind.get(&format!("{}.b", self.name));
        let mut y = if self.transposed {
            g.conv_transpose2d(x, w, self.stride, self.pad)
        } else {
            g.conv2d(x, w, self.stride, self.pad)
        };
        let shape = g.shape(y).to_vec();
        let bb = g.expand(b, &shape);
        y = g.add(y, bb);
        if self.norm {
            let gamma = bind.get(&format!("{}.gamma", self.name));
            let beta = bind.get(&format!("{}.beta", self.name));
            y = g.instance_norm(y, gamma, beta, S::from_f64(IN_EPS));
        }
        match self.act {
            Act::None => y,
            Act::Relu => g.relu(y),
            Act::Leaky => g.leaky_relu(y, S::from_f64(LEAKY_SLOPE)),
            Act::Tanh => g.tanh(y),
        }
    }

    /// Conv weight + bias element count (excludes norm parameters).
    fn conv_param_count(&self) -> usize {
        self.k * self.k * self.in_c * self.out_c + self.out_c
    }
}

fn res_blocks(prefix: &str, channels: usize, count: usize) -> Vec<ConvSpec> {
    (0..count)
        .map(|i| {
            ConvSpec::new(&format!("{prefix}.res{i}"), channels, channels, 3, 1, 1, false, true, Act::Relu)
        })
        .collect()
}

fn forward_res<S: Scalar>(g: &mut Graph<S>, bind: &Binding, blocks: &[ConvSpec], mut x: NodeId) -> NodeId {
    for b in blocks {
        let y = b.forward(g, bind, x);
        x = g.add(x, y);
    }
    x
}

// ---- Encoder ----

/// E: image `[n, 3, h, w]` -> feature map `[n, 4w, h/4, w/4]`.
pub struct Encoder {
    cfg: NetConfig,
    down: Vec<ConvSpec>,
    res: Vec<ConvSpec>,
}

impl Encoder {
    pub fn new(cfg: NetConfig) -> Self {
        let w = cfg.base_width;
        let down = vec![
            ConvSpec::new("e.down0", 3, w, 7, 1, 3, false, true, Act::Relu),
            ConvSpec::new("e.down1", w, 2 * w, 4, 2, 1, false, true, Act::Relu),
            ConvSpec::new("e.down2", 2 * w, 4 * w, 4, 2, 1, false, true, Act::Relu),
        ];
        Encoder { cfg, down, res: res_blocks("e", 4 * w, 6) }
    }

    pub fn init_params<S: Scalar, R: Rng>(&self, rng: &mut R) -> ParamSet<S> {
        let mut ps = ParamSet::new();
        for c in self.down.iter().chain(&self.res) {
            c.init(&mut ps, rng);
        }
        ps
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, bind: &Binding, image: NodeId) -> Result<NodeId> {
        let shape = g.shape(image).to_vec();
        if shape[2] % 4 != 0 || shape[3] % 4 != 0 {
            return Err(ModGanError::Shape(format!(
                "encoder input spatial size {}x{} not divisible by 4",
                shape[2], shape[3]
            )));
        }
        let mut x = image;
        for c in &self.down {
            x = c.forward(g, bind, x);
        }
        Ok(forward_res(g, bind, &self.res, x))
    }

    pub fn conv_param_count(&self) -> usize {
        self.down.iter().chain(&self.res).map(ConvSpec::conv_param_count).sum()
    }

    pub fn config(&self) -> NetConfig {
        self.cfg
    }
}

// ---- Generator ----

/// G: noise + content condition `[n, z+c0]` -> feature map `[n, 4w, h/4, w/4]`.
pub struct Generator {
    cfg: NetConfig,
    c0: usize,
    up: Vec<ConvSpec>,
}

impl Generator {
    pub fn new(cfg: NetConfig, c0: usize) -> Self {
        let w = cfg.base_width;
        // First deconv maps 1x1 -> h/32; only h in {64, 128} keeps the
        // kernel-4 arithmetic exact.
        let first_out = cfg.image_size / 32;
        assert!(
            first_out == 2 || first_out == 4,
            "generator requires image size 64 or 128, got {}",
            cfg.image_size
        );
        let first_pad = (4 - first_out) / 2;
        let up = vec![
            ConvSpec::new("g.up0", cfg.z_dim + c0, 32 * w, 4, 1, first_pad, true, true, Act::Relu),
            ConvSpec::new("g.up1", 32 * w, 16 * w, 4, 2, 1, true, true, Act::Relu),
            ConvSpec::new("g.up2", 16 * w, 8 * w, 4, 2, 1, true, true, Act::Relu),
            ConvSpec::new("g.up3", 8 * w, 4 * w, 4, 2, 1, true, true, Act::Relu),
        ];
        Generator { cfg, c0, up }
    }

    pub fn init_params<S: Scalar, R: Rng>(&self, rng: &mut R) -> ParamSet<S> {
        let mut ps = ParamSet::new();
        for c in &self.up {
            c.init(&mut ps, rng);
        }
        ps
    }

    /// `z`: `[n, z_dim]`, `a0`: `[n, c0]` one-hot.
    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, bind: &Binding, z: NodeId, a0: NodeId) -> Result<NodeId> {
        let zn = g.shape(z)[0];
        if g.shape(z)[1] != self.cfg.z_dim || g.shape(a0)[1] != self.c0 {
            return Err(ModGanError::Shape(format!(
                "generator expects z [n,{}] and a0 [n,{}], got {:?} / {:?}",
                self.cfg.z_dim,
                self.c0,
                g.shape(z),
                g.shape(a0)
            )));
        }
        let cat = g.concat_c(&[z, a0]);
        let mut x = g.reshape(cat, &[zn, self.cfg.z_dim + self.c0, 1, 1]);
        for c in &self.up {
            x = c.forward(g, bind, x);
        }
        Ok(x)
    }
}

// ---- Transformer ----

/// Controls the mask gate of a transformer forward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MaskMode {
    /// Predict `g` with the mask head and blend (the full model).
    Learned,
    /// Skip mask prediction entirely and emit `f_t = f'` (ablation).
    Disabled,
    /// Force `g` to a constant, bypassing the mask head (testing).
    Force(f64),
}

/// T_i: feature map + target condition -> (blended feature map, mask).
pub struct Transformer {
    c_i: usize,
    reduce: ConvSpec,
    res: Vec<ConvSpec>,
    mask: ConvSpec,
}

impl Transformer {
    pub fn new(cfg: NetConfig, c_i: usize) -> Self {
        let fc = cfg.feature_channels();
        Transformer {
            c_i,
            reduce: ConvSpec::new("t.reduce", fc + c_i, fc, 3, 1, 1, false, true, Act::Relu),
            res: res_blocks("t", fc, 6),
            mask: ConvSpec::new("t.mask", fc, 1, 7, 1, 3, false, false, Act::Tanh),
        }
    }

    pub fn init_params<S: Scalar, R: Rng>(&self, rng: &mut R) -> ParamSet<S> {
        let mut ps = ParamSet::new();
        self.reduce.init(&mut ps, rng);
        for c in &self.res {
            c.init(&mut ps, rng);
        }
        self.mask.init(&mut ps, rng);
        // Start with the gate mostly open (g' ~ 0.88). A near-closed gate is
        // a self-reinforcing fixed point: the transform path receives no
        // gradient through the blend, so it never improves enough to be worth
        // opening. Opening must be learned away, not toward.
        ps.get_mut("t.mask.b").fill(S::from_f64(1.0));
        ps
    }

    /// `f`: `[n, 4w, fh, fw]`, `a`: `[n, c_i]` one-hot target. Returns the
    /// blended feature map and, unless the mask is disabled, `g'` in (0,1).
    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        bind: &Binding,
        f: NodeId,
        a: NodeId,
        mode: MaskMode,
    ) -> Result<(NodeId, Option<NodeId>)> {
        let fs = g.shape(f).to_vec();
        if g.shape(a)[1] != self.c_i {
            return Err(ModGanError::Shape(format!(
                "transformer expects condition of length {}, got {}",
                self.c_i,
                g.shape(a)[1]
            )));
        }
        let n = fs[0];
        let a4 = g.reshape(a, &[n, self.c_i, 1, 1]);
        let tiled = g.expand(a4, &[n, self.c_i, fs[2], fs[3]]);
        let cat = g.concat_c(&[f, tiled]);
        let reduced = self.reduce.forward(g, bind, cat);
        let f_prime = forward_res(g, bind, &self.res, reduced);

        let g_raw = match mode {
            MaskMode::Learned => self.mask.forward(g, bind, f_prime),
            MaskMode::Disabled => return Ok((f_prime, None)),
            MaskMode::Force(v) => {
                g.constant(ArrayD::from_elem(IxDyn(&[n, 1, fs[2], fs[3]]), S::from_f64(v)))
            }
        };
        let half = S::from_f64(0.5);
        let scaled = g.scale(g_raw, half);
        let g_prime = g.add_scalar(scaled, half);
        let f_t = blend(g, f, f_prime, g_prime);
        Ok((f_t, Some(g_prime)))
    }

    pub fn condition_len(&self) -> usize {
        self.c_i
    }
}

/// `f_t = g' * f' + (1 - g') * f` with `g'` broadcast over channels.
pub fn blend<S: Scalar>(g: &mut Graph<S>, f: NodeId, f_prime: NodeId, g_prime: NodeId) -> NodeId {
    let fs = g.shape(f).to_vec();
    let gp = g.expand(g_prime, &fs);
    let a = g.mul(gp, f_prime);
    let ngp = g.neg(gp);
    let one_minus = g.add_scalar(ngp, S::one());
    let b = g.mul(one_minus, f);
    g.add(a, b)
}

// ---- Reconstructor ----

/// R: feature map `[n, 4w, h/4, w/4]` -> image `[n, 3, h, w]` in [-1, 1].
pub struct Reconstructor {
    layers: Vec<ConvSpec>,
}

impl Reconstructor {
    pub fn new(cfg: NetConfig) -> Self {
        let w = cfg.base_width;
        Reconstructor {
            layers: vec![
                ConvSpec::new("r.conv0", 4 * w, 2 * w, 7, 1, 3, false, true, Act::Relu),
                ConvSpec::new("r.up0", 2 * w, w, 4, 2, 1, true, true, Act::Relu),
                ConvSpec::new("r.up1", w, 3, 4, 2, 1, true, false, Act::Tanh),
            ],
        }
    }

    pub fn init_params<S: Scalar, R: Rng>(&self, rng: &mut R) -> ParamSet<S> {
        let mut ps = ParamSet::new();
        for c in &self.layers {
            c.init(&mut ps, rng);
        }
        ps
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, bind: &Binding, f: NodeId) -> NodeId {
        let mut x = f;
        for c in &self.layers {
            x = c.forward(g, bind, x);
        }
        x
    }
}

// ---- Discriminator ----

/// Realism score map and attribute logits from one critic.
pub struct CriticOutput {
    /// `[n, 1, h/64, w/64]`, unbounded.
    pub realism: NodeId,
    /// `[n, c_i]`, unnormalized.
    pub logits: NodeId,
}

/// D_i: image -> (realism map, attribute logits). No normalization anywhere;
/// the per-sample gradient penalty forbids it.
pub struct Discriminator {
    cfg: NetConfig,
    c_i: usize,
    body: Vec<ConvSpec>,
    realism: ConvSpec,
    cls: ConvSpec,
}

impl Discriminator {
    pub fn new(cfg: NetConfig, c_i: usize) -> Self {
        let w = cfg.base_width;
        let mut body = vec![ConvSpec::new("d.conv0", 3, w, 4, 2, 1, false, false, Act::Leaky)];
        for i in 1..6 {
            let c_in = w << (i - 1);
            body.push(ConvSpec::new(&format!("d.conv{i}"), c_in, c_in * 2, 4, 2, 1, false, false, Act::Leaky));
        }
        let top = 32 * w;
        let final_spatial = cfg.image_size / 64;
        Discriminator {
            cfg,
            c_i,
            body,
            realism: ConvSpec::new("d.real", top, 1, 3, 1, 1, false, false, Act::None),
            cls: ConvSpec::new("d.cls", top, c_i, final_spatial, 1, 0, false, false, Act::None),
        }
    }

    pub fn init_params<S: Scalar, R: Rng>(&self, rng: &mut R) -> ParamSet<S> {
        let mut ps = ParamSet::new();
        for c in &self.body {
            c.init(&mut ps, rng);
        }
        self.realism.init(&mut ps, rng);
        self.cls.init(&mut ps, rng);
        ps
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, bind: &Binding, image: NodeId) -> Result<CriticOutput> {
        let shape = g.shape(image).to_vec();
        if shape[2] % 64 != 0 || shape[3] % 64 != 0 {
            return Err(ModGanError::Shape(format!(
                "discriminator input spatial size {}x{} not divisible by 64",
                shape[2], shape[3]
            )));
        }
        if shape[2] != self.cfg.image_size {
            return Err(ModGanError::Shape(format!(
                "discriminator configured for {}px input, got {}px",
                self.cfg.image_size, shape[2]
            )));
        }
        let mut x = image;
        for c in &self.body {
            x = c.forward(g, bind, x);
        }
        let realism = self.realism.forward(g, bind, x);
        let logits4 = self.cls.forward(g, bind, x);
        let n = shape[0];
        let logits = g.reshape(logits4, &[n, self.c_i]);
        Ok(CriticOutput { realism, logits })
    }

    pub fn condition_len(&self) -> usize {
        self.c_i
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(size: usize, width: usize) -> NetConfig {
        NetConfig::new(size, width, 8)
    }

    fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<f64> {
        use rand::Rng;
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
        ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
    }

    #[test]
    fn encoder_output_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for (size, expect) in [(64usize, 16usize), (128, 32)] {
            let c = cfg(size, 4);
            let enc = Encoder::new(c);
            let ps: ParamSet<f64> = enc.init_params(&mut rng);
            let mut g = Graph::new();
            let bind = ps.bind(&mut g, false);
            let x = g.constant(randn(&mut rng, &[1, 3, size, size]));
            let f = enc.forward(&mut g, &bind, x).unwrap();
            assert_eq!(g.shape(f), &[1, 16, expect, expect]);
        }
    }

    #[test]
    fn encoder_rejects_indivisible_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = Encoder::new(cfg(64, 4));
        let ps: ParamSet<f64> = enc.init_params(&mut rng);
        let mut g = Graph::new();
        let bind = ps.bind(&mut g, false);
        let x = g.constant(randn(&mut rng, &[1, 3, 30, 30]));
        assert!(matches!(enc.forward(&mut g, &bind, x), Err(ModGanError::Shape(_))));
    }

    #[test]
    fn encoder_conv_param_count_matches_layer_table() {
        // independent tally of k^2 * c_in * c_out + biases over the layer
        // table at full width
        let w = 64usize;
        let expected = (49 * 3 * w + w)
            + (16 * w * 2 * w + 2 * w)
            + (16 * 2 * w * 4 * w + 4 * w)
            + 6 * (9 * 4 * w * 4 * w + 4 * w);
        let enc = Encoder::new(cfg(64, w));
        assert_eq!(enc.conv_param_count(), expected);
        // and the full parameter set additionally carries 2 affine values
        // per normalized output channel
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ps: ParamSet<f64> = enc.init_params(&mut rng);
        let norm_params = 2 * (w + 2 * w + 4 * w + 6 * 4 * w);
        assert_eq!(ps.value_count(), expected + norm_params);
    }

    #[test]
    fn generator_shape_progression() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = NetConfig::new(64, 4, 64);
        let gen = Generator::new(c, 10);
        let ps: ParamSet<f64> = gen.init_params(&mut rng);
        let mut g = Graph::new();
        let bind = ps.bind(&mut g, false);
        let z = g.constant(randn(&mut rng, &[2, 64]));
        let mut a0 = ArrayD::zeros(IxDyn(&[2, 10]));
        a0[[0, 7]] = 1.0;
        a0[[1, 3]] = 1.0;
        let a0 = g.constant(a0);
        let f = gen.forward(&mut g, &bind, z, a0).unwrap();
        assert_eq!(g.shape(f), &[2, 16, 16, 16]);
    }

    #[test]
    fn generator_128_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = NetConfig::new(128, 4, 16);
        let gen = Generator::new(c, 10);
        let ps: ParamSet<f64> = gen.init_params(&mut rng);
        let mut g = Graph::new();
        let bind = ps.bind(&mut g, false);
        let z = g.constant(randn(&mut rng, &[1, 16]));
        let mut a0 = ArrayD::zeros(IxDyn(&[1, 10]));
        a0[[0, 0]] = 1.0;
        let a0 = g.constant(a0);
        let f = gen.forward(&mut g, &bind, z, a0).unwrap();
        assert_eq!(g.shape(f), &[1, 16, 32, 32]);
    }

    #[test]
    fn transform_forced_mask_returns_exact_branch() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = cfg(64, 4);
        let t = Transformer::new(c, 5);
        let ps: ParamSet<f64> = t.init_params(&mut rng);

        let f_val = randn(&mut rng, &[2, 16, 16, 16]);
        let mut a_val = ArrayD::zeros(IxDyn(&[2, 5]));
        a_val[[0, 1]] = 1.0;
        a_val[[1, 4]] = 1.0;

        // g = -1 => g' = 0 => f_t = f exactly
        let mut g = Graph::new();
        let bind = ps.bind(&mut g, false);
        let f = g.constant(f_val.clone());
        let a = g.constant(a_val.clone());
        let (f_t, mask) = t.forward(&mut g, &bind, f, a, MaskMode::Force(-1.0)).unwrap();
        assert_eq!(g.value(f_t), g.value(f));
        assert!(mask.is_some());

        // g = +1 => g' = 1 => f_t = f' exactly (match the disabled-mask path)
        let mut g2 = Graph::new();
        let bind2 = ps.bind(&mut g2, false);
        let f2 = g2.constant(f_val.clone());
        let a2 = g2.constant(a_val.clone());
        let (f_t_forced, _) = t.forward(&mut g2, &bind2, f2, a2, MaskMode::Force(1.0)).unwrap();
        let mut g3 = Graph::new();
        let bind3 = ps.bind(&mut g3, false);
        let f3 = g3.constant(f_val);
        let a3 = g3.constant(a_val);
        let (f_prime, none_mask) = t.forward(&mut g3, &bind3, f3, a3, MaskMode::Disabled).unwrap();
        assert!(none_mask.is_none());
        let diff = g2
            .value(f_t_forced)
            .iter()
            .zip(g3.value(f_prime).iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert_eq!(diff, 0.0);
    }

    #[test]
    fn blend_matches_scalar_oracle_and_is_convex() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f_val = randn(&mut rng, &[2, 3, 4, 4]);
        let fp_val = randn(&mut rng, &[2, 3, 4, 4]);
        let gp_val = randn(&mut rng, &[2, 1, 4, 4]).mapv(|v: f64| (v.tanh() + 1.0) / 2.0);

        let mut g = Graph::new();
        let f = g.constant(f_val.clone());
        let fp = g.constant(fp_val.clone());
        let gp = g.constant(gp_val.clone());
        let f_t = blend(&mut g, f, fp, gp);
        let out = g.value(f_t);

        for n in 0..2 {
            for c in 0..3 {
                for i in 0..4 {
                    for j in 0..4 {
                        let gv = gp_val[[n, 0, i, j]];
                        let expect = gv * fp_val[[n, c, i, j]] + (1.0 - gv) * f_val[[n, c, i, j]];
                        let got = out[[n, c, i, j]];
                        assert!((expect - got).abs() < 1e-12);
                        let lo = f_val[[n, c, i, j]].min(fp_val[[n, c, i, j]]);
                        let hi = f_val[[n, c, i, j]].max(fp_val[[n, c, i, j]]);
                        assert!(got >= lo - 1e-12 && got <= hi + 1e-12, "blend not convex");
                    }
                }
            }
        }
    }

    #[test]
    fn mask_strictly_inside_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = cfg(64, 4);
        let t = Transformer::new(c, 2);
        let ps: ParamSet<f64> = t.init_params(&mut rng);
        let mut g = Graph::new();
        let bind = ps.bind(&mut g, false);
        let f = g.constant(randn(&mut rng, &[1, 16, 16, 16]));
        let mut a_val = ArrayD::zeros(IxDyn(&[1, 2]));
        a_val[[0, 0]] = 1.0;
        let a = g.constant(a_val);
        let (_, mask) = t.forward(&mut g, &bind, f, a, MaskMode::Learned).unwrap();
        for &v in g.value(mask.unwrap()).iter() {
            assert!(v > 0.0 && v < 1.0, "mask value {v} outside (0,1)");
        }
    }

    #[test]
    fn reconstructor_shapes_and_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for (size, fs) in [(64usize, 16usize), (128, 32)] {
            let c = cfg(size, 4);
            let r = Reconstructor::new(c);
            let ps: ParamSet<f64> = r.init_params(&mut rng);
            let mut g = Graph::new();
            let bind = ps.bind(&mut g, false);
            let f = g.constant(randn(&mut rng, &[1, 16, fs, fs]));
            let img = r.forward(&mut g, &bind, f);
            assert_eq!(g.shape(img), &[1, 3, size, size]);
            for &v in g.value(img).iter() {
                assert!((-1.0..=1.0).contains(&v));
            }
        }
    }

    #[test]
    fn discriminator_heads() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for (size, rs) in [(64usize, 1usize), (128, 2)] {
            let c = cfg(size, 2);
            let d = Discriminator::new(c, 3);
            let ps: ParamSet<f64> = d.init_params(&mut rng);
            let mut g = Graph::new();
            let bind = ps.bind(&mut g, false);
            let x = g.constant(randn(&mut rng, &[2, 3, size, size]));
            let out = d.forward(&mut g, &bind, x).unwrap();
            assert_eq!(g.shape(out.realism), &[2, 1, rs, rs]);
            assert_eq!(g.shape(out.logits), &[2, 3]);
        }
    }

    #[test]
    fn discriminator_rejects_indivisible_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let d = Discriminator::new(cfg(64, 2), 3);
        let ps: ParamSet<f64> = d.init_params(&mut rng);
        let mut g = Graph::new();
        let bind = ps.bind(&mut g, false);
        let x = g.constant(randn(&mut rng, &[1, 3, 32, 32]));
        assert!(matches!(d.forward(&mut g, &bind, x), Err(ModGanError::Shape(_))));
    }

    #[test]
    fn chain_preserves_shape_for_all_orders() {
        // interface closure for chains of length 0..=3 on 64px inputs
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let c = cfg(64, 2);
        let enc = Encoder::new(c);
        let eps: ParamSet<f64> = enc.init_params(&mut rng);
        let ts: Vec<Transformer> = (0..3).map(|i| Transformer::new(c, 2 + i)).collect();
        let tps: Vec<ParamSet<f64>> = ts.iter().map(|t| t.init_params(&mut rng)).collect();

        let mut g = Graph::new();
        let ebind = eps.bind(&mut g, false);
        let tbinds: Vec<Binding> = tps.iter().map(|p| p.bind(&mut g, false)).collect();
        let x = g.constant(randn(&mut rng, &[1, 3, 64, 64]));
        let f0 = enc.forward(&mut g, &ebind, x).unwrap();
        let base_shape = g.shape(f0).to_vec();

        for order in [[0, 1, 2], [2, 0, 1], [1, 2, 0]] {
            let mut f = f0;
            for k in 0..=2 {
                let i = order[k];
                let mut a_val = ArrayD::zeros(IxDyn(&[1, ts[i].condition_len()]));
                a_val[[0, 0]] = 1.0;
                let a = g.constant(a_val);
                let (ft, _) = ts[i].forward(&mut g, &tbinds[i], f, a, MaskMode::Learned).unwrap();
                assert_eq!(g.shape(ft), base_shape.as_slice());
                f = ft;
            }
        }
    }

    #[test]
    fn block_gradients_match_finite_differences() {
        // finite-difference spot check of one sampled weight per block at
        // f64 precision on tiny configurations
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let c = cfg(64, 1);

        let enc = Encoder::new(c);
        let ps = enc.init_params::<f64, _>(&mut rng);
        let x_val = randn(&mut rng, &[1, 3, 64, 64]);
        check_block_grad(&ps, "e.res3.w", |g, bind| {
            let x = g.constant(x_val.clone());
            let f = enc.forward(g, bind, x).unwrap();
            let q = g.square(f);
            g.mean_all(q)
        });

        let t = Transformer::new(c, 2);
        let tps = t.init_params::<f64, _>(&mut rng);
        let f_val = randn(&mut rng, &[1, 4, 16, 16]);
        check_block_grad(&tps, "t.mask.w", |g, bind| {
            let f = g.constant(f_val.clone());
            let mut a_val = ArrayD::zeros(IxDyn(&[1, 2]));
            a_val[[0, 1]] = 1.0;
            let a = g.constant(a_val);
            let (ft, _) = t.forward(g, bind, f, a, MaskMode::Learned).unwrap();
            let q = g.square(ft);
            g.mean_all(q)
        });

        let r = Reconstructor::new(c);
        let rps = r.init_params::<f64, _>(&mut rng);
        let rf_val = randn(&mut rng, &[1, 4, 16, 16]);
        check_block_grad(&rps, "r.up0.w", |g, bind| {
            let f = g.constant(rf_val.clone());
            let img = r.forward(g, bind, f);
            let q = g.square(img);
            g.mean_all(q)
        });

        let d = Discriminator::new(c, 3);
        let dps = d.init_params::<f64, _>(&mut rng);
        let dx_val = randn(&mut rng, &[1, 3, 64, 64]);
        check_block_grad(&dps, "d.conv3.w", |g, bind| {
            let x = g.constant(dx_val.clone());
            let out = d.forward(g, bind, x).unwrap();
            let s = g.mean_all(out.realism);
            let l = g.mean_all(out.logits);
            g.add(s, l)
        });
    }

    fn check_block_grad<F>(ps: &ParamSet<f64>, pname: &str, f: F)
    where
        F: Fn(&mut Graph<f64>, &Binding) -> NodeId,
    {
        let mut g = Graph::new();
        let bind = ps.bind(&mut g, true);
        let loss = f(&mut g, &bind);
        let grads = g.backward(loss);
        let gid = grads.get(bind.get(pname)).expect("no grad");
        let idx = g.value(gid).len() / 2;
        let analytic = g.value(gid).as_slice().unwrap()[idx];

        let h = 1e-5;
        let eval = |delta: f64| -> f64 {
            let mut ps2 = ps.clone();
            ps2.get_mut(pname).as_slice_mut().unwrap()[idx] += delta;
            let mut g2 = Graph::new();
            let bind2 = ps2.bind(&mut g2, false);
            let out = f(&mut g2, &bind2);
            g2.scalar(out)
        };
        let fd = (eval(h) - eval(-h)) / (2.0 * h);
        let denom = fd.abs().max(analytic.abs()).max(1e-8);
        assert!(
            (fd - analytic).abs() < 1e-8 || (fd - analytic).abs() / denom < 1e-3,
            "{pname}: fd={fd} analytic={analytic}"
        );
    }
}
