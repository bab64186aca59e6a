//! Multi-residual U-Net: a U-Net whose encoder, bridge, and decoder are built
//! from residual units, plus a global residual connection so the network
//! predicts a correction on top of its bicubic input.
//!
//! Layout per encoder level k (width `W = base_filters * 2^(k-1)`): residual
//! unit, conv block, stride-2 conv doubling the width. The bridge is a single
//! residual unit at `base_filters * 2^levels`. Each decoder level mirrors it:
//! transposed conv (kernel 2, stride 2) halving the width, BN + ReLU, concat
//! with the encoder skip, then a residual unit whose skip path is a 1x1
//! projection from `2W` to `W`, and a conv block. A conv block is conv3x3
//! (pad 1) + BN + ReLU; a residual unit is two conv blocks plus an identity
//! (or projected) skip added after the second block. The final 1x1 conv maps
//! to one channel, added to the input.
//!
//! Weights use Kaiming-uniform fan-in init (`bound = sqrt(6 / fan_in)` with
//! `fan_in = shape[1] * kh * kw`), biases start at zero, BN at gamma 1 and
//! beta 0. Parameter names are stable (`enc1.res.conv1.weight`, ...) and the
//! checkpoint format stores them by name.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BnState, Elem, Graph, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MruNetConfig {
    pub levels: usize,
    pub base_filters: usize,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    pub seed: u64,
}

impl Default for MruNetConfig {
    fn default() -> Self {
        Self {
            levels: 3,
            base_filters: 32,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
            seed: 0,
        }
    }
}

impl MruNetConfig {
    fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.levels > 6 {
            return Err(Error::InvalidConfig(format!(
                "levels must be in 1..=6, got {}",
                self.levels
            )));
        }
        if self.base_filters == 0 {
            return Err(Error::InvalidConfig("base_filters must be >= 1".into()));
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "bn_momentum must be in (0, 1), got {}",
                self.bn_momentum
            )));
        }
        if !(self.bn_eps > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "bn_eps must be > 0, got {}",
                self.bn_eps
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvBlock {
    w: usize,
    b: usize,
    gamma: usize,
    beta: usize,
    bn: usize,
    stride: usize,
    pad: usize,
}

#[derive(Debug, Clone, Copy)]
struct ResUnit {
    block1: ConvBlock,
    block2: ConvBlock,
    proj: Option<(usize, usize)>,
}

#[derive(Debug, Clone, Copy)]
struct EncLevel {
    res: ResUnit,
    post: ConvBlock,
    down: ConvBlock,
}

#[derive(Debug, Clone, Copy)]
struct DecLevel {
    up_w: usize,
    up_b: usize,
    up_gamma: usize,
    up_beta: usize,
    up_bn: usize,
    res: ResUnit,
    post: ConvBlock,
}

/// Result of one forward construction: the output node and the graph vars of
/// every parameter, aligned with [`MruNet::params`].
pub struct ForwardPass {
    pub output: Var,
    pub param_vars: Vec<Var>,
}

#[derive(Clone)]
pub struct MruNet<T: Elem> {
    config: MruNetConfig,
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    bn_names: Vec<String>,
    bn: Vec<BnState<T>>,
    input_block: ConvBlock,
    enc: Vec<EncLevel>,
    bridge: ResUnit,
    dec: Vec<DecLevel>,
    out_w: usize,
    out_b: usize,
}

struct Builder<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    bn_names: Vec<String>,
    bn: Vec<BnState<T>>,
    rng: ChaCha20Rng,
    momentum: f64,
    eps: f64,
}

impl<T: Elem> Builder<T> {
    fn kaiming(&mut self, shape: [usize; 4]) -> Tensor<T> {
        let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let data = (0..shape.iter().product::<usize>())
            .map(|_| T::from_f64((self.rng.gen::<f64>() * 2.0 - 1.0) * bound))
            .collect();
        Tensor::new(shape, data).expect("shape is non-empty")
    }

    fn push(&mut self, name: String, t: Tensor<T>) -> usize {
        self.names.push(name);
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    fn conv_params(&mut self, prefix: &str, shape: [usize; 4], out_ch: usize) -> (usize, usize) {
        let w = self.kaiming(shape);
        let wi = self.push(format!("{prefix}.weight"), w);
        let bi = self.push(format!("{prefix}.bias"), Tensor::zeros([1, out_ch, 1, 1]));
        (wi, bi)
    }

    fn bn_params(&mut self, prefix: &str, ch: usize) -> (usize, usize, usize) {
        let gi = self.push(
            format!("{prefix}.gamma"),
            Tensor::full([1, ch, 1, 1], T::one()),
        );
        let bi = self.push(format!("{prefix}.beta"), Tensor::zeros([1, ch, 1, 1]));
        self.bn_names.push(prefix.to_string());
        self.bn.push(BnState::new(ch, self.momentum, self.eps));
        (gi, bi, self.bn.len() - 1)
    }

    fn conv_block(&mut self, prefix: &str, cin: usize, cout: usize, stride: usize) -> ConvBlock {
        let (w, b) = self.conv_params(&format!("{prefix}.conv"), [cout, cin, 3, 3], cout);
        let (gamma, beta, bn) = self.bn_params(&format!("{prefix}.bn"), cout);
        ConvBlock {
            w,
            b,
            gamma,
            beta,
            bn,
            stride,
            pad: 1,
        }
    }

    fn res_unit(&mut self, prefix: &str, cin: usize, cout: usize) -> ResUnit {
        let block1 = {
            let (w, b) = self.conv_params(&format!("{prefix}.conv1"), [cout, cin, 3, 3], cout);
            let (gamma, beta, bn) = self.bn_params(&format!("{prefix}.bn1"), cout);
            ConvBlock {
                w,
                b,
                gamma,
                beta,
                bn,
                stride: 1,
                pad: 1,
            }
        };
        let block2 = {
            let (w, b) = self.conv_params(&format!("{prefix}.conv2"), [cout, cout, 3, 3], cout);
            let (gamma, beta, bn) = self.bn_params(&format!("{prefix}.bn2"), cout);
            ConvBlock {
                w,
                b,
                gamma,
                beta,
                bn,
                stride: 1,
                pad: 1,
            }
        };
        let proj = (cin != cout)
            .then(|| self.conv_params(&format!("{prefix}.proj"), [cout, cin, 1, 1], cout));
        ResUnit {
            block1,
            block2,
            proj,
        }
    }
}

fn run_conv_block<T: Elem>(
    g: &mut Graph<T>,
    vars: &[Var],
    cb: &ConvBlock,
    bn: &mut [BnState<T>],
    x: Var,
    training: bool,
) -> Result<Var> {
    let y = g.conv2d(x, vars[cb.w], vars[cb.b], cb.stride, cb.pad)?;
    let y = g.batchnorm2d(y, vars[cb.gamma], vars[cb.beta], &mut bn[cb.bn], training)?;
    Ok(g.relu(y))
}

fn run_res_unit<T: Elem>(
    g: &mut Graph<T>,
    vars: &[Var],
    ru: &ResUnit,
    bn: &mut [BnState<T>],
    x: Var,
    training: bool,
) -> Result<Var> {
    let y = run_conv_block(g, vars, &ru.block1, bn, x, training)?;
    let y = run_conv_block(g, vars, &ru.block2, bn, y, training)?;
    let skip = match ru.proj {
        Some((w, b)) => g.conv2d(x, vars[w], vars[b], 1, 0)?,
        None => x,
    };
    g.add(y, skip)
}

impl<T: Elem> MruNet<T> {
    pub fn new(config: MruNetConfig) -> Result<Self> {
        config.validate()?;
        let mut b = Builder {
            names: Vec::new(),
            tensors: Vec::new(),
            bn_names: Vec::new(),
            bn: Vec::new(),
            rng: ChaCha20Rng::seed_from_u64(config.seed),
            momentum: config.bn_momentum,
            eps: config.bn_eps,
        };
        let f = config.base_filters;
        let input_block = b.conv_block("input", 1, f, 1);
        let mut enc = Vec::with_capacity(config.levels);
        for k in 1..=config.levels {
            let w = f << (k - 1);
            let prefix = format!("enc{k}");
            let res = b.res_unit(&format!("{prefix}.res"), w, w);
            let post = b.conv_block(&format!("{prefix}.post"), w, w, 1);
            let down = b.conv_block(&format!("{prefix}.down"), w, 2 * w, 2);
            enc.push(EncLevel { res, post, down });
        }
        let bridge_w = f << config.levels;
        let bridge = b.res_unit("bridge.res", bridge_w, bridge_w);
        let mut dec = Vec::with_capacity(config.levels);
        for k in (1..=config.levels).rev() {
            let w = f << (k - 1);
            let prefix = format!("dec{k}");
            let (up_w, up_b) = b.conv_params(&format!("{prefix}.up"), [2 * w, w, 2, 2], w);
            let (up_gamma, up_beta, up_bn) = b.bn_params(&format!("{prefix}.upbn"), w);
            let res = b.res_unit(&format!("{prefix}.res"), 2 * w, w);
            let post = b.conv_block(&format!("{prefix}.post"), w, w, 1);
            dec.push(DecLevel {
                up_w,
                up_b,
                up_gamma,
                up_beta,
                up_bn,
                res,
                post,
            });
        }
        // The residual head starts at zero, so a fresh network is exactly the
        // identity around its upsampled input and the first epochs can only
        // improve on that baseline instead of unlearning init noise.
        let out_w = b.push("output.conv.weight".into(), Tensor::zeros([1, f, 1, 1]));
        let out_b = b.push("output.conv.bias".into(), Tensor::zeros([1, 1, 1, 1]));
        Ok(Self {
            config,
            names: b.names,
            tensors: b.tensors,
            bn_names: b.bn_names,
            bn: b.bn,
            input_block,
            enc,
            bridge,
            dec,
            out_w,
            out_b,
        })
    }

    pub fn config(&self) -> &MruNetConfig {
        &self.config
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Total number of trainable scalars.
    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    pub fn bn_states(&self) -> &[BnState<T>] {
        &self.bn
    }

    /// Build the forward computation on `g` for a `(N,1,H,W)` input, H and W
    /// divisible by `2^levels`. In training mode parameters are registered as
    /// differentiation targets and batch-norm running statistics update.
    pub fn forward(
        &mut self,
        g: &mut Graph<T>,
        input: &Tensor<T>,
        training: bool,
    ) -> Result<ForwardPass> {
        let vars: Vec<Var> = self
            .tensors
            .iter()
            .map(|t| g.leaf(t.clone(), training))
            .collect();
        let x = g.leaf(input.clone(), false);
        let output = self.forward_from_vars(g, &vars, x, None, training)?;
        Ok(ForwardPass {
            output,
            param_vars: vars,
        })
    }

    /// Forward topology with caller-supplied parameter vars (aligned with
    /// [`Self::params`]) and, optionally, caller-owned BN states. Used by the
    /// gradient checker, which re-runs the net with perturbed parameters and
    /// fresh statistics.
    pub fn forward_from_vars(
        &mut self,
        g: &mut Graph<T>,
        vars: &[Var],
        x: Var,
        bn_override: Option<&mut [BnState<T>]>,
        training: bool,
    ) -> Result<Var> {
        if vars.len() != self.tensors.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} parameter vars, got {}",
                self.tensors.len(),
                vars.len()
            )));
        }
        let [_, c, h, w] = g.value(x).shape();
        let div = 1usize << self.config.levels;
        if c != 1 {
            return Err(Error::ShapeMismatch(format!(
                "network input must have 1 channel, got {c}"
            )));
        }
        if h % div != 0 || w % div != 0 || h / div == 0 || w / div == 0 {
            return Err(Error::ShapeMismatch(format!(
                "input {h}x{w} must be a positive multiple of 2^levels = {div}"
            )));
        }
        let bn = match bn_override {
            Some(states) => states,
            None => &mut self.bn,
        };
        let mut cur = run_conv_block(g, vars, &self.input_block, bn, x, training)?;
        let mut skips = Vec::with_capacity(self.enc.len());
        for level in &self.enc {
            let r = run_res_unit(g, vars, &level.res, bn, cur, training)?;
            let s = run_conv_block(g, vars, &level.post, bn, r, training)?;
            skips.push(s);
            cur = run_conv_block(g, vars, &level.down, bn, s, training)?;
        }
        cur = run_res_unit(g, vars, &self.bridge, bn, cur, training)?;
        for (level, &skip) in self.dec.iter().zip(skips.iter().rev()) {
            let up = g.conv_transpose2d(cur, vars[level.up_w], vars[level.up_b], 2)?;
            let up = g.batchnorm2d(
                up,
                vars[level.up_gamma],
                vars[level.up_beta],
                &mut bn[level.up_bn],
                training,
            )?;
            let up = g.relu(up);
            let cat = g.concat_channels(up, skip)?;
            let r = run_res_unit(g, vars, &level.res, bn, cat, training)?;
            cur = run_conv_block(g, vars, &level.post, bn, r, training)?;
        }
        let residual = g.conv2d(cur, vars[self.out_w], vars[self.out_b], 1, 0)?;
        g.add(x, residual)
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"MRUC";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 4],
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    config: MruNetConfig,
    norm_max: f64,
    tensors: Vec<TensorEntry>,
}

impl MruNet<f32> {
    /// Serialize to the `MRUC` checkpoint: magic, version, a JSON manifest
    /// (config, normalization constant, tensor directory), then all tensors
    /// as little-endian f32 at their manifest offsets. BN running statistics
    /// ride along as `<layer>.running_mean` / `<layer>.running_var`.
    pub fn save_checkpoint(&self, norm_max: f64, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut entries = Vec::new();
        let mut payload: Vec<f32> = Vec::new();
        let mut put = |name: String, shape: [usize; 4], data: &[f32]| {
            entries.push(TensorEntry {
                name,
                shape,
                offset: payload.len(),
                len: data.len(),
            });
            payload.extend_from_slice(data);
        };
        for (name, t) in self.names.iter().zip(&self.tensors) {
            put(name.clone(), t.shape(), t.data());
        }
        for (name, st) in self.bn_names.iter().zip(&self.bn) {
            let c = st.running_mean.len();
            put(
                format!("{name}.running_mean"),
                [1, c, 1, 1],
                &st.running_mean,
            );
            put(format!("{name}.running_var"), [1, c, 1, 1], &st.running_var);
        }
        let manifest = Manifest {
            config: self.config,
            norm_max,
            tensors: entries,
        };
        let json = serde_json::to_vec(&manifest).expect("manifest serializes");
        let mut bytes = Vec::with_capacity(16 + json.len() + payload.len() * 4);
        bytes.extend_from_slice(CHECKPOINT_MAGIC);
        bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
        bytes.extend_from_slice(&json);
        for v in &payload {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    /// Load a checkpoint saved by [`Self::save_checkpoint`]. Returns the
    /// model and its normalization constant.
    pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Self, f64)> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.len() < 16 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("missing MRUC magic".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let json_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let payload_start = 16 + json_len;
        if bytes.len() < payload_start {
            return Err(Error::Checkpoint("truncated manifest".into()));
        }
        let manifest: Manifest = serde_json::from_slice(&bytes[16..payload_start])
            .map_err(|e| Error::Checkpoint(format!("bad manifest: {e}")))?;
        let payload_bytes = &bytes[payload_start..];
        if payload_bytes.len() % 4 != 0 {
            return Err(Error::Checkpoint("payload is not f32-aligned".into()));
        }
        let payload: Vec<f32> = payload_bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let mut net = MruNet::<f32>::new(manifest.config)?;
        let fetch = |e: &TensorEntry| -> Result<Vec<f32>> {
            let end = e.offset.checked_add(e.len);
            match end {
                Some(end) if end <= payload.len() => Ok(payload[e.offset..end].to_vec()),
                _ => Err(Error::Checkpoint(format!(
                    "tensor {} extends past payload",
                    e.name
                ))),
            }
        };
        let mut filled = vec![false; net.tensors.len()];
        let mut bn_filled = vec![(false, false); net.bn.len()];
        for entry in &manifest.tensors {
            if let Some(i) = net.param_index(&entry.name) {
                if net.tensors[i].shape() != entry.shape {
                    return Err(Error::Checkpoint(format!(
                        "tensor {} has shape {:?}, expected {:?}",
                        entry.name,
                        entry.shape,
                        net.tensors[i].shape()
                    )));
                }
                net.tensors[i] = Tensor::new(entry.shape, fetch(entry)?)?;
                filled[i] = true;
            } else if let Some(rest) = entry.name.strip_suffix(".running_mean") {
                let i =
                    net.bn_names.iter().position(|n| n == rest).ok_or_else(|| {
                        Error::Checkpoint(format!("unknown tensor {}", entry.name))
                    })?;
                net.bn[i].running_mean = fetch(entry)?;
                bn_filled[i].0 = true;
            } else if let Some(rest) = entry.name.strip_suffix(".running_var") {
                let i =
                    net.bn_names.iter().position(|n| n == rest).ok_or_else(|| {
                        Error::Checkpoint(format!("unknown tensor {}", entry.name))
                    })?;
                net.bn[i].running_var = fetch(entry)?;
                bn_filled[i].1 = true;
            } else {
                return Err(Error::Checkpoint(format!("unknown tensor {}", entry.name)));
            }
        }
        if let Some(i) = filled.iter().position(|f| !f) {
            return Err(Error::Checkpoint(format!(
                "checkpoint is missing {}",
                net.names[i]
            )));
        }
        if let Some(i) = bn_filled.iter().position(|(m, v)| !m || !v) {
            return Err(Error::Checkpoint(format!(
                "checkpoint is missing running statistics for {}",
                net.bn_names[i]
            )));
        }
        Ok((net, manifest.norm_max))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, Adam};
    use rand::Rng;

    fn small_input<T: Elem>(n: usize, hw: usize, seed: u64) -> Tensor<T> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        Tensor::from_f64_slice(
            [n, 1, hw, hw],
            &(0..n * hw * hw)
                .map(|_| rng.gen::<f64>() * 2.0 - 1.0)
                .collect::<Vec<_>>(),
        )
        .unwrap()
    }

    fn cfg(levels: usize, base_filters: usize) -> MruNetConfig {
        MruNetConfig {
            levels,
            base_filters,
            seed: 7,
            ..Default::default()
        }
    }

    /// Independent accounting of the parameter count, written from the layer
    /// recipe rather than the builder.
    fn expected_params(levels: usize, f: usize) -> usize {
        let conv_block = |cin: usize, cout: usize| cin * cout * 9 + 3 * cout;
        let res_same = |w: usize| 2 * conv_block(w, w);
        let res_proj = |cin: usize, cout: usize| {
            conv_block(cin, cout) + conv_block(cout, cout) + cin * cout + cout
        };
        let mut total = conv_block(1, f);
        for k in 1..=levels {
            let w = f << (k - 1);
            total += res_same(w) + conv_block(w, w) + conv_block(w, 2 * w);
        }
        total += res_same(f << levels);
        for k in (1..=levels).rev() {
            let w = f << (k - 1);
            total += 2 * w * w * 4 + w + 2 * w; // up conv + bias + BN affine
            total += res_proj(2 * w, w) + conv_block(w, w);
        }
        total + f + 1
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        for (levels, f) in [(1, 4), (2, 8), (3, 16)] {
            let net: MruNet<f32> = MruNet::new(cfg(levels, f)).unwrap();
            assert_eq!(
                net.num_params(),
                expected_params(levels, f),
                "levels {levels}, base {f}"
            );
        }
        // Worked out by hand for levels 2, base 8.
        let net: MruNet<f32> = MruNet::new(cfg(2, 8)).unwrap();
        assert_eq!(net.num_params(), 48521);
    }

    #[test]
    fn forward_preserves_shape() {
        let mut net: MruNet<f64> = MruNet::new(cfg(2, 4)).unwrap();
        let mut g = Graph::new();
        let x = small_input(2, 16, 1);
        let pass = net.forward(&mut g, &x, false).unwrap();
        assert_eq!(g.value(pass.output).shape(), [2, 1, 16, 16]);
    }

    #[test]
    fn forward_rejects_bad_inputs() {
        let mut net: MruNet<f64> = MruNet::new(cfg(2, 4)).unwrap();
        let mut g = Graph::new();
        let odd = small_input(1, 6, 2);
        assert!(net.forward(&mut g, &odd, false).is_err(), "6 % 4 != 0");
        let two_ch: Tensor<f64> = Tensor::zeros([1, 2, 16, 16]);
        assert!(net.forward(&mut g, &two_ch, false).is_err());
    }

    #[test]
    fn zeroed_output_conv_gives_exact_identity() {
        let mut net: MruNet<f32> = MruNet::new(cfg(2, 4)).unwrap();
        for name in ["output.conv.weight", "output.conv.bias"] {
            let i = net.param_index(name).unwrap();
            let shape = net.params()[i].shape();
            net.params_mut()[i] = Tensor::zeros(shape);
        }
        let x = small_input::<f32>(1, 16, 3);
        let mut g = Graph::new();
        let pass = net.forward(&mut g, &x, false).unwrap();
        assert_eq!(
            g.value(pass.output).data(),
            x.data(),
            "global residual must make the zeroed net an identity"
        );
    }

    #[test]
    fn init_is_deterministic_in_the_seed() {
        let a: MruNet<f32> = MruNet::new(cfg(2, 4)).unwrap();
        let b: MruNet<f32> = MruNet::new(cfg(2, 4)).unwrap();
        assert_eq!(a.params(), b.params());
        let c: MruNet<f32> = MruNet::new(MruNetConfig {
            seed: 8,
            ..cfg(2, 4)
        })
        .unwrap();
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn init_respects_kaiming_bounds_and_zeroed_biases() {
        let net: MruNet<f64> = MruNet::new(cfg(2, 8)).unwrap();
        for (name, t) in net.param_names().iter().zip(net.params()) {
            if name == "output.conv.weight" {
                // The residual head starts at zero by design.
                assert!(t.data().iter().all(|&v| v == 0.0), "{name} must start at 0");
            } else if name.ends_with(".weight") {
                let s = t.shape();
                let bound = (6.0 / (s[1] * s[2] * s[3]) as f64).sqrt();
                assert!(
                    t.data().iter().all(|v| v.abs() <= bound),
                    "{name} exceeds bound {bound}"
                );
                assert!(
                    t.data().iter().any(|v| v.abs() > 0.5 * bound),
                    "{name} suspiciously concentrated"
                );
            } else if name.ends_with(".bias") || name.ends_with(".beta") {
                assert!(t.data().iter().all(|&v| v == 0.0), "{name} must start at 0");
            } else if name.ends_with(".gamma") {
                assert!(t.data().iter().all(|&v| v == 1.0), "{name} must start at 1");
            } else {
                panic!("unexpected parameter name {name}");
            }
        }
    }

    #[test]
    fn stable_parameter_names() {
        let net: MruNet<f32> = MruNet::new(cfg(2, 4)).unwrap();
        for name in [
            "input.conv.weight",
            "enc1.res.conv1.weight",
            "enc1.res.bn2.gamma",
            "enc1.post.conv.bias",
            "enc2.down.conv.weight",
            "bridge.res.conv2.weight",
            "dec2.up.weight",
            "dec2.upbn.beta",
            "dec2.res.proj.weight",
            "dec1.post.bn.gamma",
            "output.conv.bias",
        ] {
            assert!(net.param_index(name).is_some(), "missing {name}");
        }
    }

    #[test]
    fn whole_network_gradients_match_finite_differences() {
        let mut net: MruNet<f64> = MruNet::new(cfg(2, 2)).unwrap();
        // Shift every BN beta to 1 so post-BN activations sit away from the
        // ReLU kink; finite differences are only meaningful where the network
        // is differentiable. Give the zero-initialized head generic values so
        // gradients upstream of it do not vanish identically.
        for i in 0..net.params().len() {
            if net.param_names()[i].ends_with(".beta") {
                let shape = net.params()[i].shape();
                net.params_mut()[i] = Tensor::full(shape, 1.0);
            }
        }
        let hw = net.param_index("output.conv.weight").unwrap();
        net.params_mut()[hw] = Tensor::from_f64_slice([1, 2, 1, 1], &[0.37, -0.52]).unwrap();
        let hb = net.param_index("output.conv.bias").unwrap();
        net.params_mut()[hb] = Tensor::from_f64_slice([1, 1, 1, 1], &[0.11]).unwrap();
        let x = small_input::<f64>(1, 16, 11);
        let mut rng = ChaCha20Rng::seed_from_u64(12);
        let target = Tensor::from_f64_slice(
            [1, 1, 16, 16],
            &(0..256)
                .map(|_| rng.gen::<f64>() * 2.0 - 1.0)
                .collect::<Vec<_>>(),
        )
        .unwrap();
        let params = net.params().to_vec();
        let report = grad_check(
            |g, vars| {
                let xv = g.leaf(x.clone(), false);
                let mut bn: Vec<BnState<f64>> = net
                    .bn_states()
                    .iter()
                    .map(|s| BnState::new(s.running_mean.len(), 0.1, 1e-5))
                    .collect();
                let mut net_view = MruNet::new(cfg(2, 2)).unwrap();
                let out = net_view.forward_from_vars(g, vars, xv, Some(&mut bn), true)?;
                let tv = g.leaf(target.clone(), false);
                g.mse_loss(out, tv)
            },
            &params,
            3,
            1e-5,
            13,
        )
        .unwrap();
        assert!(report.checked >= 3 * 40, "checked {}", report.checked);
        assert!(
            report.max_rel_err < 1e-6,
            "max rel err {}",
            report.max_rel_err
        );
    }

    #[test]
    fn one_adam_step_reduces_training_loss() {
        let mut net: MruNet<f64> = MruNet::new(cfg(1, 4)).unwrap();
        let x = small_input::<f64>(2, 8, 21);
        let mut rng = ChaCha20Rng::seed_from_u64(22);
        let target = Tensor::from_f64_slice(
            [2, 1, 8, 8],
            &(0..128)
                .map(|_| rng.gen::<f64>() * 2.0 - 1.0)
                .collect::<Vec<_>>(),
        )
        .unwrap();
        let mut adam: Adam<f64> = Adam::new(1e-3);
        let mut losses = Vec::new();
        for _ in 0..8 {
            let mut g = Graph::new();
            let pass = net.forward(&mut g, &x, true).unwrap();
            let tv = g.leaf(target.clone(), false);
            let loss = g.mse_loss(pass.output, tv).unwrap();
            losses.push(g.scalar(loss).unwrap());
            let (grads, _) = g.backward(loss).unwrap();
            let gs: Vec<&Tensor<f64>> = pass
                .param_vars
                .iter()
                .map(|&v| grads.get(v).expect("every parameter receives a gradient"))
                .collect();
            adam.step(net.params_mut(), &gs).unwrap();
        }
        assert!(
            losses.last().unwrap() < losses.first().unwrap(),
            "loss should drop over a few steps: {losses:?}"
        );
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.mruc");
        let mut net: MruNet<f32> = MruNet::new(cfg(2, 4)).unwrap();
        // Dirty the running statistics so the round trip covers them.
        let x = small_input::<f32>(2, 16, 31);
        let mut g = Graph::new();
        net.forward(&mut g, &x, true).unwrap();
        net.save_checkpoint(305.25, &path).unwrap();
        let (back, norm_max) = MruNet::<f32>::load_checkpoint(&path).unwrap();
        assert_eq!(norm_max, 305.25);
        assert_eq!(back.config(), net.config());
        assert_eq!(back.params(), net.params());
        assert_eq!(back.bn_states(), net.bn_states());
        // Same eval-mode output, bit for bit.
        let mut net = net;
        let mut back = back;
        let probe = small_input::<f32>(1, 16, 32);
        let mut ga = Graph::new();
        let pa = net.forward(&mut ga, &probe, false).unwrap();
        let mut gb = Graph::new();
        let pb = back.forward(&mut gb, &probe, false).unwrap();
        assert_eq!(ga.value(pa.output).data(), gb.value(pb.output).data());
    }

    #[test]
    fn checkpoint_rejects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.mruc");
        let net: MruNet<f32> = MruNet::new(cfg(1, 2)).unwrap();
        net.save_checkpoint(300.0, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        let bad_magic = {
            let mut b = bytes.clone();
            b[0] = b'X';
            b
        };
        std::fs::write(&path, bad_magic).unwrap();
        assert!(MruNet::<f32>::load_checkpoint(&path).is_err());

        let bad_version = {
            let mut b = bytes.clone();
            b[4] = 99;
            b
        };
        std::fs::write(&path, bad_version).unwrap();
        assert!(MruNet::<f32>::load_checkpoint(&path).is_err());

        std::fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
        assert!(MruNet::<f32>::load_checkpoint(&path).is_err());
    }
}
