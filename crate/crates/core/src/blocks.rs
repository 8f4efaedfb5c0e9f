//! ConvBiS6 mixer, the residual HydraMamba block, and the point embedding.

use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::numcore::{Binding, ParamId, ParamStore, Tape, Tensor, Var};
use crate::pointio::PointCloud;
use crate::spacefill::Serialization;
use crate::sscan::{bidirectional, HeadConfig, S6Ids, S6Params, S6Vars, ScanMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConvKind {
    /// One kernel per channel.
    #[default]
    Depthwise,
    /// Dense `D x D x k` kernel.
    Traditional,
}

impl FromStr for ConvKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "depthwise" => Ok(ConvKind::Depthwise),
            "traditional" => Ok(ConvKind::Traditional),
            _ => Err(Error::Config(format!("unknown conv kind {s:?}"))),
        }
    }
}

impl std::fmt::Display for ConvKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ConvKind::Depthwise => "depthwise",
            ConvKind::Traditional => "traditional",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub model_dim: usize,
    pub state_dim: usize,
    pub num_heads: usize,
    pub conv_kernel: usize,
    pub ffn_ratio: usize,
    pub conv_kind: ConvKind,
    /// Run the reverse-direction scan alongside the forward one.
    pub bidirectional: bool,
    /// Include the convolution branch.
    pub conv_branch: bool,
    pub scan_mode: ScanMode,
}

pub const DEFAULT_CONV_KERNEL: usize = 7;
pub const DEFAULT_FFN_RATIO: usize = 4;

impl BlockConfig {
    pub fn new(model_dim: usize, state_dim: usize, num_heads: usize) -> Self {
        BlockConfig {
            model_dim,
            state_dim,
            num_heads,
            conv_kernel: DEFAULT_CONV_KERNEL,
            ffn_ratio: DEFAULT_FFN_RATIO,
            conv_kind: ConvKind::Depthwise,
            bidirectional: true,
            conv_branch: true,
            scan_mode: ScanMode::Sequential,
        }
    }

    pub fn heads(&self) -> HeadConfig {
        HeadConfig {
            num_heads: self.num_heads,
            model_dim: self.model_dim,
            state_dim: self.state_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.heads().validate()?;
        if self.conv_kernel == 0 || self.conv_kernel.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "conv kernel must be odd, got {}",
                self.conv_kernel
            )));
        }
        if self.ffn_ratio == 0 {
            return Err(Error::Config("ffn ratio must be at least 1".into()));
        }
        if let ScanMode::Chunked(0) = self.scan_mode {
            return Err(Error::Config("scan chunk must be at least 1".into()));
        }
        Ok(())
    }

    fn conv_shape(&self) -> Vec<usize> {
        let (d, k) = (self.model_dim, self.conv_kernel);
        match self.conv_kind {
            ConvKind::Depthwise => vec![d, k],
            ConvKind::Traditional => vec![d, d, k],
        }
    }
}

/// Learnable tensors of one HydraMamba block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockState {
    pub norm1_gamma: Tensor,
    pub norm1_beta: Tensor,
    pub fwd: Vec<S6Params>,
    pub bwd: Option<Vec<S6Params>>,
    pub conv: Option<Tensor>,
    pub out_w: Tensor,
    pub out_b: Tensor,
    pub norm2_gamma: Tensor,
    pub norm2_beta: Tensor,
    pub ffn_w1: Tensor,
    pub ffn_b1: Tensor,
    pub ffn_w2: Tensor,
    pub ffn_b2: Tensor,
}

fn uniform_fan_in(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    Tensor::uniform(shape, 1.0 / (fan_in as f64).sqrt(), rng)
}

impl BlockState {
    pub fn init(cfg: &BlockConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.model_dim;
        let hidden = d * cfg.ffn_ratio;
        let heads = cfg.heads();
        let fwd = heads.init_heads(rng);
        let bwd = cfg.bidirectional.then(|| heads.init_heads(rng));
        let conv = cfg.conv_branch.then(|| {
            let fan_in = match cfg.conv_kind {
                ConvKind::Depthwise => cfg.conv_kernel,
                ConvKind::Traditional => d * cfg.conv_kernel,
            };
            uniform_fan_in(&cfg.conv_shape(), fan_in, rng)
        });
        Ok(BlockState {
            norm1_gamma: Tensor::full(&[d], 1.0),
            norm1_beta: Tensor::zeros(&[d]),
            fwd,
            bwd,
            conv,
            out_w: uniform_fan_in(&[d, d], d, rng),
            out_b: Tensor::zeros(&[d]),
            norm2_gamma: Tensor::full(&[d], 1.0),
            norm2_beta: Tensor::zeros(&[d]),
            ffn_w1: uniform_fan_in(&[d, hidden], d, rng),
            ffn_b1: Tensor::zeros(&[hidden]),
            ffn_w2: uniform_fan_in(&[hidden, d], hidden, rng),
            ffn_b2: Tensor::zeros(&[d]),
        })
    }

    fn s6_tensors_mut(&mut self) -> impl Iterator<Item = &mut S6Params> {
        self.fwd.iter_mut().chain(self.bwd.iter_mut().flatten())
    }

    /// Zero every input-dependent projection of the scan branch, so the
    /// global path contributes exactly zero.
    pub fn zero_global(&mut self) {
        for p in self.s6_tensors_mut() {
            p.w_b.scale_assign(0.0);
            p.w_c.scale_assign(0.0);
        }
    }

    pub fn zero_conv(&mut self) {
        if let Some(k) = &mut self.conv {
            k.scale_assign(0.0);
        }
    }

    /// Make both residual sublayers output exactly zero.
    pub fn zero_sublayers(&mut self) {
        self.zero_global();
        self.zero_conv();
        for t in [
            &mut self.out_w,
            &mut self.out_b,
            &mut self.ffn_w1,
            &mut self.ffn_b1,
            &mut self.ffn_w2,
            &mut self.ffn_b2,
        ] {
            t.scale_assign(0.0);
        }
    }

    pub fn register(&self, store: &mut ParamStore, prefix: &str) -> BlockIds {
        let mut add = |name: &str, t: &Tensor| store.add(format!("{prefix}.{name}"), t.clone());
        let norm1 = (
            add("norm1.gamma", &self.norm1_gamma),
            add("norm1.beta", &self.norm1_beta),
        );
        let conv = self.conv.as_ref().map(|k| add("conv", k));
        let out = (add("out.w", &self.out_w), add("out.b", &self.out_b));
        let norm2 = (
            add("norm2.gamma", &self.norm2_gamma),
            add("norm2.beta", &self.norm2_beta),
        );
        let ffn = [
            add("ffn.w1", &self.ffn_w1),
            add("ffn.b1", &self.ffn_b1),
            add("ffn.w2", &self.ffn_w2),
            add("ffn.b2", &self.ffn_b2),
        ];
        let fwd = self
            .fwd
            .iter()
            .enumerate()
            .map(|(i, p)| p.register(store, &format!("{prefix}.fwd{i}")))
            .collect();
        let bwd = self.bwd.as_ref().map(|heads| {
            heads
                .iter()
                .enumerate()
                .map(|(i, p)| p.register(store, &format!("{prefix}.bwd{i}")))
                .collect()
        });
        BlockIds {
            norm1,
            fwd,
            bwd,
            conv,
            out,
            norm2,
            ffn,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BlockIds {
    norm1: (ParamId, ParamId),
    fwd: Vec<S6Ids>,
    bwd: Option<Vec<S6Ids>>,
    conv: Option<ParamId>,
    out: (ParamId, ParamId),
    norm2: (ParamId, ParamId),
    ffn: [ParamId; 4],
}

impl BlockIds {
    pub fn bind(&self, b: &Binding) -> BlockVars {
        BlockVars {
            norm1: (b.var(self.norm1.0), b.var(self.norm1.1)),
            fwd: self.fwd.iter().map(|s| s.bind(b)).collect(),
            bwd: self.bwd.as_ref().map(|v| v.iter().map(|s| s.bind(b)).collect()),
            conv: self.conv.map(|id| b.var(id)),
            out: (b.var(self.out.0), b.var(self.out.1)),
            norm2: (b.var(self.norm2.0), b.var(self.norm2.1)),
            ffn: self.ffn.map(|id| b.var(id)),
        }
    }
}

/// A block's parameters as tape variables.
#[derive(Debug, Clone)]
pub struct BlockVars {
    pub norm1: (Var, Var),
    pub fwd: Vec<S6Vars>,
    pub bwd: Option<Vec<S6Vars>>,
    pub conv: Option<Var>,
    pub out: (Var, Var),
    pub norm2: (Var, Var),
    pub ffn: [Var; 4],
}

impl BlockVars {
    pub fn constant_on(tape: &Tape, state: &BlockState) -> Self {
        let mut store = ParamStore::new();
        let ids = state.register(&mut store, "b");
        ids.bind(&store.bind_frozen(tape))
    }

    pub fn leaf_on(tape: &Tape, state: &BlockState) -> (Self, Binding) {
        let mut store = ParamStore::new();
        let ids = state.register(&mut store, "b");
        let binding = store.bind(tape);
        (ids.bind(&binding), binding)
    }
}

fn check_serialization(tape: &Tape, x: Var, ser: &Serialization) -> Result<()> {
    let len = tape.shape(x)[0];
    if ser.len() != len {
        return Err(contract(format!(
            "serialization covers {} points but the sequence has {len}",
            ser.len()
        )));
    }
    Ok(())
}

/// ConvBiS6 on `x[L, D]` in original point order: gather into curve order,
/// sum the (bidirectional) multi-head scan and the convolution over the
/// ordered sequence, project, and scatter back.
pub fn convbis6(tape: &Tape, x: Var, p: &BlockVars, cfg: &BlockConfig, ser: &Serialization) -> Result<Var> {
    check_serialization(tape, x, ser)?;
    let xs = tape.gather_rows(x, &ser.perm)?;
    let mut y = bidirectional(tape, xs, &p.fwd, p.bwd.as_deref(), cfg.scan_mode)?;
    if let Some(kernel) = p.conv {
        let local = match cfg.conv_kind {
            ConvKind::Depthwise => tape.depthwise_conv1d(xs, kernel)?,
            ConvKind::Traditional => tape.conv1d(xs, kernel)?,
        };
        y = tape.add(y, local)?;
    }
    let y = tape.linear(y, p.out.0, Some(p.out.1))?;
    tape.gather_rows(y, &ser.inv_perm)
}

fn ffn(tape: &Tape, x: Var, p: &BlockVars) -> Result<Var> {
    let [w1, b1, w2, b2] = p.ffn;
    let h = tape.linear(x, w1, Some(b1))?;
    let h = tape.silu(h)?;
    tape.linear(h, w2, Some(b2))
}

/// `x1 = x + convbis6(norm(x))`, `y = x1 + ffn(norm(x1))`.
pub fn hydra_block(tape: &Tape, x: Var, p: &BlockVars, cfg: &BlockConfig, ser: &Serialization) -> Result<Var> {
    let n1 = tape.layer_norm(x, p.norm1.0, p.norm1.1)?;
    let m = convbis6(tape, n1, p, cfg, ser)?;
    let x1 = tape.add(x, m)?;
    let n2 = tape.layer_norm(x1, p.norm2.0, p.norm2.1)?;
    let f = ffn(tape, n2, p)?;
    tape.add(x1, f)
}

/// Evaluate one block on concrete tensors.
pub fn hydra_block_eval(x: &Tensor, state: &BlockState, cfg: &BlockConfig, ser: &Serialization) -> Result<Tensor> {
    let tape = Tape::new();
    let xv = tape.constant(x.clone());
    let p = BlockVars::constant_on(&tape, state);
    let y = hydra_block(&tape, xv, &p, cfg, ser)?;
    let out = tape.value(y).clone();
    Ok(out)
}

pub fn convbis6_eval(x: &Tensor, state: &BlockState, cfg: &BlockConfig, ser: &Serialization) -> Result<Tensor> {
    let tape = Tape::new();
    let xv = tape.constant(x.clone());
    let p = BlockVars::constant_on(&tape, state);
    let y = convbis6(&tape, xv, &p, cfg, ser)?;
    let out = tape.value(y).clone();
    Ok(out)
}

/// Per-point two-layer MLP lifting `(xyz ‖ features)` to the model width.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbedState {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl EmbedState {
    pub fn init(in_dim: usize, model_dim: usize, rng: &mut impl Rng) -> Self {
        EmbedState {
            w1: uniform_fan_in(&[in_dim, model_dim], in_dim, rng),
            b1: Tensor::zeros(&[model_dim]),
            w2: uniform_fan_in(&[model_dim, model_dim], model_dim, rng),
            b2: Tensor::zeros(&[model_dim]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w1.shape()[0]
    }

    pub fn register(&self, store: &mut ParamStore, prefix: &str) -> [ParamId; 4] {
        [
            store.add(format!("{prefix}.w1"), self.w1.clone()),
            store.add(format!("{prefix}.b1"), self.b1.clone()),
            store.add(format!("{prefix}.w2"), self.w2.clone()),
            store.add(format!("{prefix}.b2"), self.b2.clone()),
        ]
    }
}

/// `[n, 3 + c]` rows of coordinates followed by any feature columns.
pub fn point_inputs(pc: &PointCloud) -> Result<Tensor> {
    pc.validate()?;
    let c = pc.feature_dim();
    let mut data = Vec::with_capacity(pc.len() * (3 + c));
    for (i, p) in pc.coords.iter().enumerate() {
        data.extend_from_slice(p);
        if let Some(f) = &pc.features {
            data.extend_from_slice(&f[i]);
        }
    }
    Tensor::new(&[pc.len(), 3 + c], data)
}

pub fn embed(tape: &Tape, inputs: Var, p: [Var; 4]) -> Result<Var> {
    let [w1, b1, w2, b2] = p;
    let h = tape.linear(inputs, w1, Some(b1))?;
    let h = tape.silu(h)?;
    tape.linear(h, w2, Some(b2))
}

pub fn embed_eval(pc: &PointCloud, state: &EmbedState) -> Result<Tensor> {
    let inputs = point_inputs(pc)?;
    if inputs.shape()[1] != state.in_dim() {
        return Err(Error::Shape {
            op: "embed",
            lhs: inputs.shape().to_vec(),
            rhs: state.w1.shape().to_vec(),
        });
    }
    let tape = Tape::new();
    let x = tape.constant(inputs);
    let p = [&state.w1, &state.b1, &state.w2, &state.b2].map(|t| tape.constant(t.clone()));
    let y = embed(&tape, x, p)?;
    let out = tape.value(y).clone();
    Ok(out)
}
