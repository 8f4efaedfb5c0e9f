//! Selective state-space machinery: discretization, the sequential and
//! chunk-parallel scans of `h_t = a_t * h_{t-1} + b_t`, the input-dependent
//! S6 layer, its multi-head form and the bidirectional composition.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::numcore::{Binding, CustomOp, ParamId, ParamStore, Tape, Tensor, Var};
use crate::par;

/// How `B̄` is formed from `Δ`, `A` and `B`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Discretization {
    /// `B̄ = Δ B`, the rule used by the S6 layer.
    Euler,
    /// `B̄ = (ΔA)^{-1} (exp(ΔA) - 1) Δ B`.
    ExactZoh,
}

/// `Ā[t,c,n] = exp(Δ[t,c] A[c,n])` and `B̄[t,c,n]` per `mode`, for a diagonal
/// `A[d, N]`, input-dependent `B[L, N]` and step sizes `Δ[L, d]`.
pub fn discretize(a: &Tensor, b: &Tensor, delta: &Tensor, mode: Discretization) -> Result<(Tensor, Tensor)> {
    let (d, n) = a.dims2("discretize")?;
    let (l, n2) = b.dims2("discretize")?;
    let (l2, d2) = delta.dims2("discretize")?;
    if n != n2 || l != l2 || d != d2 {
        return Err(Error::Shape {
            op: "discretize",
            lhs: a.shape().to_vec(),
            rhs: delta.shape().to_vec(),
        });
    }
    if let Some(v) = delta.data().iter().find(|&&v| !(v > 0.0)) {
        return Err(contract(format!("step size must be positive, got {v}")));
    }
    if let Some(v) = a.data().iter().find(|&&v| !(v < 0.0)) {
        return Err(contract(format!("state matrix must be negative, got {v}")));
    }
    let mut a_bar = vec![0.0; l * d * n];
    let mut b_bar = vec![0.0; l * d * n];
    for t in 0..l {
        for c in 0..d {
            let dt = delta.at2(t, c);
            for k in 0..n {
                let i = (t * d + c) * n + k;
                let z = dt * a.at2(c, k);
                a_bar[i] = z.exp();
                b_bar[i] = match mode {
                    Discretization::Euler => dt * b.at2(t, k),
                    // (e^z - 1)/z * Δ B, with expm1 for accuracy at small z.
                    Discretization::ExactZoh => z.exp_m1() / z * dt * b.at2(t, k),
                };
            }
        }
    }
    Ok((Tensor::new(&[l, d, n], a_bar)?, Tensor::new(&[l, d, n], b_bar)?))
}

/// Per-step coefficients of the scan: `Ā[L,d,N]`, `B̄x[L,d,N]` and `C[L,N]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanParams {
    pub len: usize,
    pub dim: usize,
    pub state: usize,
    pub a_bar: Vec<f64>,
    pub bx: Vec<f64>,
    pub c: Vec<f64>,
}

impl ScanParams {
    pub fn new(len: usize, dim: usize, state: usize, a_bar: Vec<f64>, bx: Vec<f64>, c: Vec<f64>) -> Result<Self> {
        let w = len * dim * state;
        if len == 0 || dim == 0 || state == 0 || a_bar.len() != w || bx.len() != w || c.len() != len * state {
            return Err(Error::Shape {
                op: "scan_params",
                lhs: vec![len, dim, state],
                rhs: vec![a_bar.len(), bx.len(), c.len()],
            });
        }
        Ok(ScanParams {
            len,
            dim,
            state,
            a_bar,
            bx,
            c,
        })
    }

    /// Fold the input `x[L, d]` into `B̄` and pair with `Ā` and `C[L, N]`.
    pub fn from_discrete(a_bar: &Tensor, b_bar: &Tensor, c: &Tensor, x: &Tensor) -> Result<Self> {
        let &[l, d, n] = a_bar.shape() else {
            return Err(Error::Shape {
                op: "scan_params",
                lhs: a_bar.shape().to_vec(),
                rhs: vec![0, 0, 0],
            });
        };
        if b_bar.shape() != a_bar.shape() || c.shape() != [l, n] || x.shape() != [l, d] {
            return Err(Error::Shape {
                op: "scan_params",
                lhs: a_bar.shape().to_vec(),
                rhs: x.shape().to_vec(),
            });
        }
        let mut bx = b_bar.data().to_vec();
        for t in 0..l {
            for ch in 0..d {
                let xv = x.at2(t, ch);
                bx[(t * d + ch) * n..(t * d + ch + 1) * n]
                    .iter_mut()
                    .for_each(|v| *v *= xv);
            }
        }
        ScanParams::new(l, d, n, a_bar.data().to_vec(), bx, c.data().to_vec())
    }

    /// Stable random coefficients: `Ā` in `[0.05, 0.999)`, `B̄x` and `C` in `[-1, 1)`.
    pub fn random(len: usize, dim: usize, state: usize, seed: u64) -> Result<Self> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let w = len * dim * state;
        let a_bar = (0..w).map(|_| r.random_range(0.05..0.999)).collect();
        let bx = (0..w).map(|_| r.random_range(-1.0..1.0)).collect();
        let c = (0..len * state).map(|_| r.random_range(-1.0..1.0)).collect();
        ScanParams::new(len, dim, state, a_bar, bx, c)
    }

    fn width(&self) -> usize {
        self.dim * self.state
    }
}

/// `max|y - reference| / max|reference|`, or the absolute deviation when the
/// reference is all zeros.
pub fn normwise_rel_error(reference: &[f64], y: &[f64]) -> f64 {
    let scale = reference.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let dev = reference.iter().zip(y).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    if scale > 0.0 {
        dev / scale
    } else {
        dev
    }
}

/// The scan's associative combine: `(a1, b1) ⊗ (a2, b2) = (a1 a2, a2 b1 + b2)`,
/// where the left operand is the earlier segment.
#[inline]
pub fn combine(p: (f64, f64), q: (f64, f64)) -> (f64, f64) {
    (p.0 * q.0, q.0 * p.1 + q.1)
}

/// All hidden states `h[L, width]` of the recurrence, one step at a time.
pub fn scan_states_seq(a: &[f64], b: &[f64], width: usize) -> Vec<f64> {
    let mut h = vec![0.0; a.len()];
    let mut prev = vec![0.0; width];
    for (t, (arow, brow)) in a.chunks(width).zip(b.chunks(width)).enumerate() {
        for i in 0..width {
            prev[i] = arow[i] * prev[i] + brow[i];
        }
        h[t * width..(t + 1) * width].copy_from_slice(&prev);
    }
    h
}

#[derive(Clone)]
struct Segment {
    a: Vec<f64>,
    b: Vec<f64>,
}

impl Segment {
    fn identity(width: usize) -> Self {
        Segment {
            a: vec![1.0; width],
            b: vec![0.0; width],
        }
    }

    fn then(&self, later: &Segment) -> Segment {
        let mut out = later.clone();
        for i in 0..self.a.len() {
            let (a, b) = combine((self.a[i], self.b[i]), (later.a[i], later.b[i]));
            out.a[i] = a;
            out.b[i] = b;
        }
        out
    }
}

/// Work-efficient exclusive scan (up-sweep, down-sweep) over segment
/// summaries. The tree depends only on the number of segments.
fn exclusive_tree_scan(mut nodes: Vec<Segment>, width: usize) -> Vec<Segment> {
    let m = nodes.len();
    let size = m.next_power_of_two();
    nodes.resize(size, Segment::identity(width));

    let mut stride = 1;
    while stride < size {
        par::for_each_chunk_mut(&mut nodes, 2 * stride, |_, block| {
            let (left, right) = block.split_at_mut(stride);
            right[stride - 1] = left[stride - 1].then(&right[stride - 1]);
        });
        stride *= 2;
    }

    nodes[size - 1] = Segment::identity(width);
    let mut stride = size / 2;
    while stride >= 1 {
        par::for_each_chunk_mut(&mut nodes, 2 * stride, |_, block| {
            let (left, right) = block.split_at_mut(stride);
            let parent = std::mem::replace(&mut right[stride - 1], Segment::identity(0));
            let left_total = std::mem::replace(&mut left[stride - 1], parent.clone());
            right[stride - 1] = parent.then(&left_total);
        });
        stride /= 2;
    }
    nodes.truncate(m);
    nodes
}

/// Hidden states computed chunk-parallel: each chunk scans locally from a zero
/// state, chunk summaries go through a fixed exclusive tree scan, and the
/// carried-in state is folded back into every chunk. The evaluation order
/// depends only on `(L, chunk)`, never on the number of workers. With a
/// single chunk the result is bit-identical to [`scan_states_seq`].
pub fn scan_states_par(a: &[f64], b: &[f64], width: usize, chunk: usize) -> Vec<f64> {
    let len = a.len() / width;
    let chunk = chunk.clamp(1, len.max(1));
    let mut cells: Vec<(f64, f64)> = vec![(0.0, 0.0); a.len()];

    // Local scans: (running product of a, local state).
    par::for_each_chunk_mut(&mut cells, chunk * width, |j, block| {
        let t0 = j * chunk;
        let rows = block.len() / width;
        for r in 0..rows {
            let off = (t0 + r) * width;
            for i in 0..width {
                let (av, bv) = (a[off + i], b[off + i]);
                let (pp, ph) = if r == 0 { (1.0, 0.0) } else { block[(r - 1) * width + i] };
                block[r * width + i] = (if r == 0 { av } else { pp * av }, av * ph + bv);
            }
        }
    });

    let num_chunks = len.div_ceil(chunk);
    if num_chunks > 1 {
        let summaries: Vec<Segment> = (0..num_chunks)
            .map(|j| {
                let last = ((j + 1) * chunk).min(len) - 1;
                let row = &cells[last * width..(last + 1) * width];
                Segment {
                    a: row.iter().map(|c| c.0).collect(),
                    b: row.iter().map(|c| c.1).collect(),
                }
            })
            .collect();
        let carries = exclusive_tree_scan(summaries, width);
        par::for_each_chunk_mut(&mut cells, chunk * width, |j, block| {
            if j == 0 {
                return;
            }
            let carry = &carries[j].b;
            for row in block.chunks_mut(width) {
                for (cell, h0) in row.iter_mut().zip(carry) {
                    cell.1 += cell.0 * h0;
                }
            }
        });
    }
    cells.into_iter().map(|c| c.1).collect()
}

/// `y[t, c] = sum_n C[t, n] h[t, c, n]`.
fn readout(h: &[f64], c: &[f64], len: usize, dim: usize, state: usize) -> Vec<f64> {
    let mut y = vec![0.0; len * dim];
    for t in 0..len {
        let crow = &c[t * state..(t + 1) * state];
        for ch in 0..dim {
            let hrow = &h[(t * dim + ch) * state..(t * dim + ch + 1) * state];
            y[t * dim + ch] = crow.iter().zip(hrow).map(|(a, b)| a * b).sum();
        }
    }
    y
}

/// Reference scan: `h_0 = 0`, `h_t = Ā_t ∘ h_{t-1} + B̄x_t`, `y_t = C_t · h_t`.
pub fn selective_scan_seq(p: &ScanParams) -> Tensor {
    let h = scan_states_seq(&p.a_bar, &p.bx, p.width());
    Tensor::new(&[p.len, p.dim], readout(&h, &p.c, p.len, p.dim, p.state)).expect("consistent dims")
}

/// Same recurrence evaluated chunk-parallel; see [`scan_states_par`].
pub fn selective_scan_par(p: &ScanParams, chunk: usize) -> Result<Tensor> {
    if chunk == 0 {
        return Err(contract("scan chunk must be at least 1"));
    }
    let h = scan_states_par(&p.a_bar, &p.bx, p.width(), chunk);
    Tensor::new(&[p.len, p.dim], readout(&h, &p.c, p.len, p.dim, p.state))
}

/// Which scan kernel the differentiable S6 uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ScanMode {
    #[default]
    Sequential,
    Chunked(usize),
}

/// Fused discretize + scan + readout with an analytic backward pass.
struct SelectiveScan {
    len: usize,
    dim: usize,
    state: usize,
    a_bar: Vec<f64>,
    states: Vec<f64>,
}

impl CustomOp for SelectiveScan {
    fn name(&self) -> &'static str {
        "selective_scan"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let (delta, a, b, c, x) = (inputs[0], inputs[1], inputs[2], inputs[3], inputs[4]);
        let (l, d, n) = (self.len, self.dim, self.state);
        let w = d * n;
        let gy = grad.data();
        let mut g_delta = vec![0.0; l * d];
        let mut g_a = vec![0.0; d * n];
        let mut g_b = vec![0.0; l * n];
        let mut g_c = vec![0.0; l * n];
        let mut g_x = vec![0.0; l * d];
        // Cotangent of h_t, carried backwards through h_{t+1} = Ā_{t+1} h_t + ...
        let mut gh = vec![0.0; w];
        for t in (0..l).rev() {
            for ch in 0..d {
                let gyt = gy[t * d + ch];
                let dt = delta.at2(t, ch);
                let xv = x.at2(t, ch);
                for k in 0..n {
                    let i = ch * n + k;
                    let next = if t + 1 < l {
                        self.a_bar[(t + 1) * w + i] * gh[i]
                    } else {
                        0.0
                    };
                    let g = gyt * c.at2(t, k) + next;
                    gh[i] = g;
                    let h = self.states[t * w + i];
                    g_c[t * n + k] += gyt * h;
                    let h_prev = if t > 0 { self.states[(t - 1) * w + i] } else { 0.0 };
                    let abar = self.a_bar[t * w + i];
                    // d Ā / d(ΔA) = Ā
                    let g_z = g * h_prev * abar;
                    let bk = b.at2(t, k);
                    g_delta[t * d + ch] += g_z * a.at2(ch, k) + g * bk * xv;
                    g_a[i] += g_z * dt;
                    g_b[t * n + k] += g * dt * xv;
                    g_x[t * d + ch] += g * dt * bk;
                }
            }
        }
        vec![
            Some(Tensor::new(&[l, d], g_delta).expect("dims")),
            Some(Tensor::new(&[d, n], g_a).expect("dims")),
            Some(Tensor::new(&[l, n], g_b).expect("dims")),
            Some(Tensor::new(&[l, n], g_c).expect("dims")),
            Some(Tensor::new(&[l, d], g_x).expect("dims")),
        ]
    }
}

/// Differentiable selective scan with Euler `B̄ = Δ B`:
/// `delta[L,d]`, `a[d,N]` (negative), `b[L,N]`, `c[L,N]`, `x[L,d]` -> `y[L,d]`.
pub fn selective_scan(tape: &Tape, delta: Var, a: Var, b: Var, c: Var, x: Var, mode: ScanMode) -> Result<Var> {
    let (output, op) = {
        let (dv, av, bv, cv, xv) = (
            tape.value(delta),
            tape.value(a),
            tape.value(b),
            tape.value(c),
            tape.value(x),
        );
        let (l, d) = xv.dims2("selective_scan")?;
        let (d2, n) = av.dims2("selective_scan")?;
        if d != d2 || dv.shape() != [l, d] || bv.shape() != [l, n] || cv.shape() != [l, n] {
            return Err(Error::Shape {
                op: "selective_scan",
                lhs: xv.shape().to_vec(),
                rhs: av.shape().to_vec(),
            });
        }
        let w = d * n;
        let mut a_bar = vec![0.0; l * w];
        let mut bx = vec![0.0; l * w];
        for t in 0..l {
            for ch in 0..d {
                let dt = dv.at2(t, ch);
                let dx = dt * xv.at2(t, ch);
                for k in 0..n {
                    let i = t * w + ch * n + k;
                    a_bar[i] = (dt * av.at2(ch, k)).exp();
                    bx[i] = dx * bv.at2(t, k);
                }
            }
        }
        let states = match mode {
            ScanMode::Sequential => scan_states_seq(&a_bar, &bx, w),
            ScanMode::Chunked(chunk) => scan_states_par(&a_bar, &bx, w, chunk.max(1)),
        };
        let y = readout(&states, cv.data(), l, d, n);
        (
            Tensor::new(&[l, d], y)?,
            SelectiveScan {
                len: l,
                dim: d,
                state: n,
                a_bar,
                states,
            },
        )
    };
    tape.custom(&[delta, a, b, c, x], output, Box::new(op))
}

/// Learnable tensors of one S6 unit over `d` channels with state size `N`.
#[derive(Debug, Clone, PartialEq)]
pub struct S6Params {
    /// `log(-A)`, shape `[d, N]`.
    pub a_log: Tensor,
    /// `[d]`
    pub delta_bias: Tensor,
    /// `[d, N]`
    pub w_b: Tensor,
    /// `[d, N]`
    pub w_c: Tensor,
    /// `[d, d]`
    pub w_delta: Tensor,
}

pub const DT_MIN: f64 = 1e-3;
pub const DT_MAX: f64 = 1e-1;

impl S6Params {
    /// `A_log = log(1..=N)` per channel; `softplus(Δ_bias)` log-uniform in
    /// `[DT_MIN, DT_MAX]`; projections uniform in `±1/sqrt(d)`.
    pub fn init(dim: usize, state: usize, rng: &mut impl Rng) -> Self {
        let mut a_log = Vec::with_capacity(dim * state);
        for _ in 0..dim {
            a_log.extend((1..=state).map(|k| (k as f64).ln()));
        }
        let bias = (0..dim)
            .map(|_| {
                let dt = (rng.random_range(DT_MIN.ln()..DT_MAX.ln())).exp();
                // inverse softplus
                dt + (-(-dt).exp_m1()).ln()
            })
            .collect();
        let bound = 1.0 / (dim as f64).sqrt();
        S6Params {
            a_log: Tensor::new(&[dim, state], a_log).expect("dims"),
            delta_bias: Tensor::vector(bias),
            w_b: Tensor::uniform(&[dim, state], bound, rng),
            w_c: Tensor::uniform(&[dim, state], bound, rng),
            w_delta: Tensor::uniform(&[dim, dim], bound, rng),
        }
    }

    pub fn dim(&self) -> usize {
        self.a_log.shape()[0]
    }

    pub fn state(&self) -> usize {
        self.a_log.shape()[1]
    }

    pub fn tensors(&self) -> [&Tensor; 5] {
        [&self.a_log, &self.delta_bias, &self.w_b, &self.w_c, &self.w_delta]
    }

    fn from_tensors(t: [Tensor; 5]) -> Self {
        let [a_log, delta_bias, w_b, w_c, w_delta] = t;
        S6Params {
            a_log,
            delta_bias,
            w_b,
            w_c,
            w_delta,
        }
    }

    /// Record as trainable leaves on `tape`.
    pub fn leaf_on(&self, tape: &Tape) -> S6Vars {
        S6Vars::from_array(self.tensors().map(|t| tape.leaf(t.clone())))
    }

    pub fn constant_on(&self, tape: &Tape) -> S6Vars {
        S6Vars::from_array(self.tensors().map(|t| tape.constant(t.clone())))
    }

    pub fn register(&self, store: &mut ParamStore, prefix: &str) -> S6Ids {
        let names = ["a_log", "delta_bias", "w_b", "w_c", "w_delta"];
        let t = self.tensors();
        S6Ids {
            ids: std::array::from_fn(|i| store.add(format!("{prefix}.{}", names[i]), t[i].clone())),
        }
    }

    /// Flattened layout used by gradient checks: the five tensors in order.
    pub fn to_vec(&self) -> Vec<Tensor> {
        self.tensors().iter().map(|t| (*t).clone()).collect()
    }

    pub fn from_slice(t: &[Tensor]) -> Self {
        Self::from_tensors(std::array::from_fn(|i| t[i].clone()))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct S6Ids {
    ids: [ParamId; 5],
}

impl S6Ids {
    pub fn bind(&self, b: &Binding) -> S6Vars {
        S6Vars::from_array(self.ids.map(|id| b.var(id)))
    }

    pub fn ids(&self) -> &[ParamId; 5] {
        &self.ids
    }
}

#[derive(Debug, Clone, Copy)]
pub struct S6Vars {
    pub a_log: Var,
    pub delta_bias: Var,
    pub w_b: Var,
    pub w_c: Var,
    pub w_delta: Var,
}

impl S6Vars {
    pub fn from_array(v: [Var; 5]) -> Self {
        S6Vars {
            a_log: v[0],
            delta_bias: v[1],
            w_b: v[2],
            w_c: v[3],
            w_delta: v[4],
        }
    }
}

/// S6 over `x[L, d]`: `B = x W_B`, `C = x W_C`,
/// `Δ = softplus(x W_Δ + Δ_bias)`, `A = -exp(A_log)`, then the scan.
pub fn s6_forward(tape: &Tape, x: Var, p: &S6Vars, mode: ScanMode) -> Result<Var> {
    let b = tape.linear(x, p.w_b, None)?;
    let c = tape.linear(x, p.w_c, None)?;
    let dpre = tape.linear(x, p.w_delta, Some(p.delta_bias))?;
    let delta = tape.softplus(dpre)?;
    let ea = tape.exp(p.a_log)?;
    let a = tape.scale(ea, -1.0)?;
    selective_scan(tape, delta, a, b, c, x, mode)
}

/// Head layout of a multi-head S6.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub num_heads: usize,
    pub model_dim: usize,
    pub state_dim: usize,
}

pub const DEFAULT_HEADS: usize = 6;

impl HeadConfig {
    pub fn new(num_heads: usize, model_dim: usize, state_dim: usize) -> Result<Self> {
        let cfg = HeadConfig {
            num_heads,
            model_dim,
            state_dim,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || self.model_dim == 0 || self.state_dim == 0 {
            return Err(Error::Config("heads, model dim and state dim must be positive".into()));
        }
        if !self.model_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "{} heads do not divide model dim {}",
                self.num_heads, self.model_dim
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }

    /// Fresh parameters for every head.
    pub fn init_heads(&self, rng: &mut impl Rng) -> Vec<S6Params> {
        (0..self.num_heads)
            .map(|_| S6Params::init(self.head_dim(), self.state_dim, rng))
            .collect()
    }
}

/// Multi-head S6 over `x[L, D]`: channels split into `heads.len()` equal
/// groups, an independent S6 per group, outputs concatenated channel-wise.
pub fn mhs6_forward(tape: &Tape, x: Var, heads: &[S6Vars], mode: ScanMode) -> Result<Var> {
    let shape = tape.shape(x);
    let [_, d] = shape[..] else {
        return Err(Error::Shape {
            op: "mhs6",
            lhs: shape,
            rhs: vec![0, 0],
        });
    };
    let h = heads.len();
    if h == 0 || d % h != 0 {
        return Err(Error::Config(format!("{h} heads do not divide model dim {d}")));
    }
    let parts = tape.split(x, 1, &vec![d / h; h])?;
    let ys = parts
        .iter()
        .zip(heads)
        .map(|(&xi, p)| s6_forward(tape, xi, p, mode))
        .collect::<Result<Vec<_>>>()?;
    tape.concat(&ys, 1)
}

/// `mixer(x; fwd) + reverse(mixer(reverse(x); bwd))`. Without `bwd` only the
/// forward (causal) branch runs.
pub fn bidirectional(tape: &Tape, x: Var, fwd: &[S6Vars], bwd: Option<&[S6Vars]>, mode: ScanMode) -> Result<Var> {
    let yf = mhs6_forward(tape, x, fwd, mode)?;
    let Some(bwd) = bwd else { return Ok(yf) };
    let xr = tape.reverse_rows(x)?;
    let yr = mhs6_forward(tape, xr, bwd, mode)?;
    let yb = tape.reverse_rows(yr)?;
    tape.add(yf, yb)
}

/// Evaluate a plain S6 on concrete tensors.
pub fn s6_eval(x: &Tensor, p: &S6Params, mode: ScanMode) -> Result<Tensor> {
    let tape = Tape::new();
    let xv = tape.constant(x.clone());
    let vars = p.constant_on(&tape);
    let y = s6_forward(&tape, xv, &vars, mode)?;
    let out = tape.value(y).clone();
    Ok(out)
}

/// Evaluate a multi-head S6 on concrete tensors.
pub fn mhs6_eval(x: &Tensor, heads: &[S6Params], mode: ScanMode) -> Result<Tensor> {
    let tape = Tape::new();
    let xv = tape.constant(x.clone());
    let vars: Vec<S6Vars> = heads.iter().map(|p| p.constant_on(&tape)).collect();
    let y = mhs6_forward(&tape, xv, &vars, mode)?;
    let out = tape.value(y).clone();
    Ok(out)
}

/// Evaluate the bidirectional composition on concrete tensors.
pub fn bidirectional_eval(x: &Tensor, fwd: &[S6Params], bwd: Option<&[S6Params]>, mode: ScanMode) -> Result<Tensor> {
    let tape = Tape::new();
    let xv = tape.constant(x.clone());
    let f: Vec<S6Vars> = fwd.iter().map(|p| p.constant_on(&tape)).collect();
    let b: Option<Vec<S6Vars>> = bwd.map(|b| b.iter().map(|p| p.constant_on(&tape)).collect());
    let y = bidirectional(&tape, xv, &f, b.as_deref(), mode)?;
    let out = tape.value(y).clone();
    Ok(out)
}

#[cfg(test)]
mod tests;
