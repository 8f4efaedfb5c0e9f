//! Named finite-difference checks over every differentiable piece, from
//! single primitives up to a whole model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::blocks::{embed, hydra_block, BlockConfig, BlockState, EmbedState};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ToyTask};
use crate::numcore::{check_gradients, Binding, GradCheckReport, ParamStore, Tape, Tensor, Var};
use crate::resample::{grid_assign, interp_weights};
use crate::spacefill::{serialize_coords, HILBERT_VARIANTS};
use crate::sscan::{bidirectional, mhs6_forward, s6_forward, selective_scan, HeadConfig, S6Params, S6Vars, ScanMode};

#[derive(Debug, Clone, Serialize)]
pub struct SuiteEntry {
    pub name: &'static str,
    pub report: GradCheckReport,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.report.passed()
    }
}

/// Which checks to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SuiteLevel {
    /// Primitives, scans, S6 variants, one block, the embedding.
    Components,
    /// Everything above plus the tiny recognition and segmentation models.
    Tiny,
}

impl std::str::FromStr for SuiteLevel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "components" => Ok(SuiteLevel::Components),
            "tiny" => Ok(SuiteLevel::Tiny),
            _ => Err(Error::Config(format!("unknown gradcheck config {s:?}"))),
        }
    }
}

struct Gen(ChaCha8Rng);

impl Gen {
    fn randn(&mut self, shape: &[usize]) -> Tensor {
        Tensor::randn(shape, 1.0, &mut self.0)
    }

    fn positive(&mut self, shape: &[usize]) -> Tensor {
        self.randn(shape).map(|v| 0.1 + v.abs())
    }

    /// Redraw `softplus(delta_bias)` from `[0.1, 1)`. With the init range
    /// some A-path gradients sit near the difference quotient's rounding
    /// floor, which says nothing about the backward pass.
    fn wide_dt(&mut self, bias: &mut Tensor) {
        for v in bias.data_mut() {
            let dt: f64 = self.0.random_range(0.1..1.0);
            *v = dt + (-(-dt).exp_m1()).ln();
        }
    }

    fn wide_dt_store(&mut self, store: &ParamStore, values: &mut [Tensor]) {
        for (id, x) in store.ids().zip(values) {
            if store.name(id).ends_with("delta_bias") {
                self.wide_dt(x);
            }
        }
    }
}

fn s6_inputs(p: &S6Params) -> Vec<Tensor> {
    p.to_vec()
}

fn s6_vars(v: &[Var]) -> S6Vars {
    S6Vars::from_array(std::array::from_fn(|i| v[i]))
}

type Check = Box<dyn Fn(&Tape, &[Var]) -> Result<Var>>;

fn entries(level: SuiteLevel, seed: u64) -> Result<Vec<(&'static str, Check, Vec<Tensor>)>> {
    let mut g = Gen(ChaCha8Rng::seed_from_u64(seed));
    let mut out: Vec<(&'static str, Check, Vec<Tensor>)> = Vec::new();
    macro_rules! add {
        ($name:literal, $inputs:expr, $f:expr) => {
            out.push(($name, Box::new($f), $inputs))
        };
    }
    add!("matmul", vec![g.randn(&[3, 4]), g.randn(&[4, 5])], |t, v| t
        .matmul(v[0], v[1]));
    add!(
        "linear",
        vec![g.randn(&[5, 4]), g.randn(&[4, 3]), g.randn(&[3])],
        |t, v| { t.linear(v[0], v[1], Some(v[2])) }
    );
    add!("add", vec![g.randn(&[3, 4]), g.randn(&[3, 4])], |t, v| t
        .add(v[0], v[1]));
    add!("mul", vec![g.randn(&[3, 4]), g.randn(&[3, 4])], |t, v| t
        .mul(v[0], v[1]));
    add!("exp", vec![g.randn(&[3, 4])], |t, v| t.exp(v[0]));
    add!("softplus", vec![g.randn(&[3, 4])], |t, v| t.softplus(v[0]));
    add!("silu", vec![g.randn(&[3, 4])], |t, v| t.silu(v[0]));
    add!(
        "layer_norm",
        vec![g.randn(&[4, 6]), g.randn(&[6]), g.randn(&[6])],
        |t, v| { t.layer_norm(v[0], v[1], v[2]) }
    );
    add!("depthwise_conv1d", vec![g.randn(&[9, 3]), g.randn(&[3, 5])], |t, v| t
        .depthwise_conv1d(v[0], v[1]));
    add!("conv1d", vec![g.randn(&[9, 3]), g.randn(&[4, 3, 3])], |t, v| t
        .conv1d(v[0], v[1]));
    add!("pointwise_conv1d", vec![g.randn(&[9, 3]), g.randn(&[3, 4])], |t, v| {
        t.pointwise_conv1d(v[0], v[1], None)
    });
    add!("reshape", vec![g.randn(&[4, 6])], |t, v| t.reshape(v[0], &[3, 8]));
    add!("transpose", vec![g.randn(&[4, 6])], |t, v| t.transpose(v[0]));
    add!("concat", vec![g.randn(&[4, 2]), g.randn(&[4, 3])], |t, v| t
        .concat(&[v[0], v[1]], 1));
    add!("split", vec![g.randn(&[4, 6])], |t, v| {
        let parts = t.split(v[0], 1, &[2, 4])?;
        let a = t.scale(parts[0], 2.0)?;
        t.concat(&[parts[1], a], 1)
    });
    add!("gather_rows", vec![g.randn(&[5, 3])], |t, v| t
        .gather_rows(v[0], &[4, 0, 0, 2, 1]));
    add!("mean_pool", vec![g.randn(&[5, 3])], |t, v| t.mean_pool(v[0], 0));
    add!("softmax", vec![g.randn(&[3, 4])], |t, v| t.softmax(v[0]));
    add!("cross_entropy", vec![g.randn(&[3, 4])], |t, v| t
        .cross_entropy(v[0], &[2, 0, 3]));

    let coords: Vec<[f64; 3]> = (0..16).map(|_| std::array::from_fn(|_| g.randn(&[1]).item())).collect();
    let fine: Vec<[f64; 3]> = (0..24).map(|_| std::array::from_fn(|_| g.randn(&[1]).item())).collect();
    let w = interp_weights(&coords, &fine, 3)?;
    add!("interp_up", vec![g.randn(&[16, 3])], move |t, v| t
        .weighted_gather(v[0], &w.idx, &w.weights, w.k));
    let grid = grid_assign(&coords, 0.8)?;
    let num = grid.num_voxels();
    let assignment = grid.assignment.clone();
    add!("grid_pool", vec![g.randn(&[16, 3])], move |t, v| t.segment_mean(
        v[0],
        &assignment,
        num
    ));
    let assignment = grid.assignment;
    add!("grid_unpool", vec![g.randn(&[num, 3])], move |t, v| t
        .gather_rows(v[0], &assignment));

    let (l, d, n) = (7, 3, 4);
    add!(
        "selective_scan",
        vec![
            g.positive(&[l, d]),
            g.positive(&[d, n]).map(|v| -v),
            g.randn(&[l, n]),
            g.randn(&[l, n]),
            g.randn(&[l, d])
        ],
        |t, v| selective_scan(t, v[0], v[1], v[2], v[3], v[4], ScanMode::Sequential)
    );
    add!(
        "selective_scan_chunked",
        vec![
            g.positive(&[l, d]),
            g.positive(&[d, n]).map(|v| -v),
            g.randn(&[l, n]),
            g.randn(&[l, n]),
            g.randn(&[l, d])
        ],
        |t, v| selective_scan(t, v[0], v[1], v[2], v[3], v[4], ScanMode::Chunked(3))
    );
    let mut p = S6Params::init(4, 3, &mut g.0);
    g.wide_dt(&mut p.delta_bias);
    let mut inputs = vec![g.randn(&[8, 4])];
    inputs.extend(s6_inputs(&p));
    add!("s6_forward", inputs, |t, v| s6_forward(
        t,
        v[0],
        &s6_vars(&v[1..]),
        ScanMode::Sequential
    ));

    let mut heads = HeadConfig::new(3, 6, 3)?.init_heads(&mut g.0);
    heads.iter_mut().for_each(|h| g.wide_dt(&mut h.delta_bias));
    let mut inputs = vec![g.randn(&[8, 6])];
    inputs.extend(heads.iter().flat_map(s6_inputs));
    add!("mhs6_forward", inputs, |t, v| {
        let hv: Vec<S6Vars> = v[1..].chunks(5).map(s6_vars).collect();
        mhs6_forward(t, v[0], &hv, ScanMode::Sequential)
    });
    let hc = HeadConfig::new(2, 4, 3)?;
    let (mut f, mut b) = (hc.init_heads(&mut g.0), hc.init_heads(&mut g.0));
    f.iter_mut().chain(&mut b).for_each(|h| g.wide_dt(&mut h.delta_bias));
    let mut inputs = vec![g.randn(&[8, 4])];
    inputs.extend(f.iter().chain(&b).flat_map(s6_inputs));
    add!("bidirectional_mhs6", inputs, |t, v| {
        let hv: Vec<S6Vars> = v[1..].chunks(5).map(s6_vars).collect();
        bidirectional(t, v[0], &hv[..2], Some(&hv[2..]), ScanMode::Sequential)
    });

    let bcfg = BlockConfig {
        conv_kernel: 3,
        ffn_ratio: 2,
        ..BlockConfig::new(6, 3, 2)
    };
    let state = BlockState::init(&bcfg, &mut g.0)?;
    let mut store = ParamStore::new();
    let ids = state.register(&mut store, "block");
    let mut inputs = vec![g.randn(&[10, 6])];
    inputs.extend(store.values().iter().cloned());
    g.wide_dt_store(&store, &mut inputs[1..]);
    let ser = serialize_coords(&fine[..10], HILBERT_VARIANTS[1], 8)?;
    add!("hydra_block", inputs, move |t, v| {
        let p = ids.bind(&Binding::from_vars(v[1..].to_vec()));
        hydra_block(t, v[0], &p, &bcfg, &ser)
    });

    let e = EmbedState::init(5, 6, &mut g.0);
    add!("embed", vec![g.randn(&[8, 5]), e.w1, e.b1, e.w2, e.b2], |t, v| {
        embed(t, v[0], [v[1], v[2], v[3], v[4]])
    });

    if level == SuiteLevel::Tiny {
        for (name, preset) in [("tiny_model", "tiny"), ("tiny_segmentation_model", "tiny-seg")] {
            let model = Model::new(ModelConfig::preset(preset)?, seed)?;
            let pc = ToyTask {
                n_points: 32,
                ..ToyTask::default()
            }
            .cloud(0, 1)?;
            let mut inputs = model.store.values().to_vec();
            g.wide_dt_store(&model.store, &mut inputs);
            let plan = model.config().shuffle_seed;
            out.push((
                name,
                Box::new(move |t: &Tape, v: &[Var]| {
                    let b = Binding::from_vars(v.to_vec());
                    model.forward(t, &b, &pc, plan)
                }),
                inputs,
            ));
        }
    }
    Ok(out)
}

/// Run every check of `level`, inputs drawn from `seed`.
pub fn run_suite(level: SuiteLevel, seed: u64) -> Result<Vec<SuiteEntry>> {
    entries(level, seed)?
        .into_iter()
        .map(|(name, f, inputs)| {
            Ok(SuiteEntry {
                name,
                report: check_gradients(&*f, &inputs)?,
            })
        })
        .collect()
}
