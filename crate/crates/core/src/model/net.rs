//! Embedding, encoder stages, optional decoder, and task heads.

use std::collections::HashMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{ModelConfig, Task, TransitionKind};
use crate::blocks::{embed, hydra_block, point_inputs, BlockConfig, BlockIds, BlockState, EmbedState};
use crate::error::{Error, Result};
use crate::numcore::{Binding, ParamId, ParamStore, Tape, Tensor, Var};
use crate::pointio::{Point, PointCloud};
use crate::resample::Resampling;
use crate::spacefill::{make_shuffle_plan, serialize_coords, CurveVariant, Serialization};

struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Linear {
            w: store.add(format!("{name}.w"), Tensor::uniform(&[fan_in, fan_out], bound, rng)),
            b: store.add(format!("{name}.b"), Tensor::zeros(&[fan_out])),
        }
    }

    fn apply(&self, tape: &Tape, b: &Binding, x: Var) -> Result<Var> {
        tape.linear(x, b.var(self.w), Some(b.var(self.b)))
    }
}

struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

impl Norm {
    fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Norm {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[d], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[d])),
        }
    }

    fn apply(&self, tape: &Tape, b: &Binding, x: Var) -> Result<Var> {
        tape.layer_norm(x, b.var(self.gamma), b.var(self.beta))
    }
}

/// Two-layer MLP with SiLU in between.
struct Mlp {
    l1: Linear,
    l2: Linear,
}

impl Mlp {
    fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_hidden: usize,
        d_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Mlp {
            l1: Linear::new(store, &format!("{name}.fc1"), d_in, d_hidden, rng),
            l2: Linear::new(store, &format!("{name}.fc2"), d_hidden, d_out, rng),
        }
    }

    fn apply(&self, tape: &Tape, b: &Binding, x: Var) -> Result<Var> {
        let h = self.l1.apply(tape, b, x)?;
        let h = tape.silu(h)?;
        self.l2.apply(tape, b, h)
    }
}

struct Stage {
    /// Width change on entering the stage (absent for the first stage).
    proj: Option<Linear>,
    cfg: BlockConfig,
    blocks: Vec<BlockIds>,
}

struct DecoderStage {
    proj: Linear,
    cfg: BlockConfig,
    blocks: Vec<BlockIds>,
}

struct Layout {
    embed: [ParamId; 4],
    stages: Vec<Stage>,
    decoder: Vec<DecoderStage>,
    norm_out: Norm,
    head: Mlp,
}

/// A configured network and its parameters.
pub struct Model {
    cfg: ModelConfig,
    pub store: ParamStore,
    layout: Layout,
}

/// The order each block will see, derived from a plan seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BlockOrder {
    Curve(CurveVariant),
    /// Random permutation with this seed.
    Random(u64),
}

/// Per-forward geometry: point sets of each stage and the transitions
/// between them. Depends only on coordinates, never on parameters.
pub struct Geometry {
    pub coords: Vec<Vec<Point>>,
    pub transitions: Vec<Resampling>,
}

fn mix(a: u64, b: u64) -> u64 {
    // splitmix64 finalizer over the pair
    let mut z = a ^ b
        .wrapping_add(0x9e37_79b9_7f4a_7c15)
        .wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive an independent seed from `seed` and a sequence of indices.
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(mix(seed, 0x5eed), |s, &p| mix(s, p))
}

impl Model {
    /// Validate `cfg` and initialize every parameter from `seed`.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d0 = cfg.stage_dims[0];
        let embed = EmbedState::init(3 + cfg.in_features, d0, &mut rng).register(&mut store, "embed");

        let mut stages = Vec::with_capacity(cfg.num_stages());
        for s in 0..cfg.num_stages() {
            let proj = (s > 0).then(|| {
                Linear::new(
                    &mut store,
                    &format!("down{s}"),
                    cfg.stage_dims[s - 1],
                    cfg.stage_dims[s],
                    &mut rng,
                )
            });
            let bcfg = cfg.block_config(s);
            let blocks = (0..cfg.stage_blocks[s])
                .map(|i| Ok(BlockState::init(&bcfg, &mut rng)?.register(&mut store, &format!("enc{s}.{i}"))))
                .collect::<Result<Vec<_>>>()?;
            stages.push(Stage {
                proj,
                cfg: bcfg,
                blocks,
            });
        }

        let mut decoder = Vec::new();
        for s in (1..=cfg.num_decoder_stages()).rev() {
            let bcfg = cfg.block_config(s - 1);
            let proj = Linear::new(
                &mut store,
                &format!("up{s}"),
                cfg.stage_dims[s],
                cfg.stage_dims[s - 1],
                &mut rng,
            );
            let blocks = (0..cfg.decoder_blocks)
                .map(|i| Ok(BlockState::init(&bcfg, &mut rng)?.register(&mut store, &format!("dec{s}.{i}"))))
                .collect::<Result<Vec<_>>>()?;
            decoder.push(DecoderStage {
                proj,
                cfg: bcfg,
                blocks,
            });
        }

        let d_out = match cfg.task {
            Task::Recognition => *cfg.stage_dims.last().expect("validated"),
            Task::Segmentation => d0,
        };
        let norm_out = Norm::new(&mut store, "norm_out", d_out);
        let head = Mlp::new(&mut store, "head", d_out, d_out, cfg.num_classes, &mut rng);
        Ok(Model {
            cfg,
            store,
            layout: Layout {
                embed,
                stages,
                decoder,
                norm_out,
                head,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn num_params(&self) -> usize {
        self.store.numel()
    }

    /// Serialization choices for every block under `plan_seed`.
    pub fn block_orders(&self, plan_seed: u64) -> Result<Vec<BlockOrder>> {
        let n = self.cfg.total_blocks();
        if n == 0 {
            return Ok(Vec::new());
        }
        Ok(match self.cfg.serialization.shuffle_mode() {
            Some(mode) => make_shuffle_plan(n, plan_seed, mode)?
                .assignments
                .into_iter()
                .map(BlockOrder::Curve)
                .collect(),
            None => (0..n as u64)
                .map(|i| BlockOrder::Random(derive_seed(plan_seed, &[i])))
                .collect(),
        })
    }

    /// Point sets of every stage for the cloud `coords`.
    pub fn geometry(&self, coords: &[Point]) -> Result<Geometry> {
        let mut sets = vec![coords.to_vec()];
        let mut transitions = Vec::new();
        for s in 1..self.cfg.num_stages() {
            let fine = &sets[s - 1];
            let r = match self.cfg.transition {
                TransitionKind::Fps => {
                    let m = fine.len().div_ceil(self.cfg.downsample);
                    Resampling::fps(fine, m, self.cfg.k_neighbors)?
                }
                TransitionKind::Grid => {
                    let size = self.cfg.grid_size * f64::powi(2.0, s as i32 - 1);
                    Resampling::grid(fine, size)?
                }
            };
            let coarse = r.coarse_coords(fine);
            transitions.push(r);
            sets.push(coarse);
        }
        Ok(Geometry {
            coords: sets,
            transitions,
        })
    }

    /// Logits of `pc`: `[num_classes]` for recognition, `[n, num_classes]`
    /// for segmentation.
    pub fn forward(&self, tape: &Tape, b: &Binding, pc: &PointCloud, plan_seed: u64) -> Result<Var> {
        let inputs = point_inputs(pc)?;
        if inputs.shape()[1] != 3 + self.cfg.in_features {
            return Err(Error::Shape {
                op: "model input",
                lhs: inputs.shape().to_vec(),
                rhs: vec![pc.len(), 3 + self.cfg.in_features],
            });
        }
        let geo = self.geometry(&pc.coords)?;
        let orders = self.block_orders(plan_seed)?;
        let mut orders = orders.iter();
        let mut serializer = Serializer::new(self.cfg.bits);

        let x = tape.constant(inputs);
        let mut x = embed(tape, x, self.layout.embed.map(|id| b.var(id)))?;
        let mut skips = Vec::with_capacity(self.cfg.num_stages());
        for (s, stage) in self.layout.stages.iter().enumerate() {
            if let Some(proj) = &stage.proj {
                x = geo.transitions[s - 1].down(tape, x)?;
                x = proj.apply(tape, b, x)?;
            }
            for ids in &stage.blocks {
                let ser = serializer.get(s, &geo.coords[s], orders.next().expect("plan covers blocks"))?;
                x = hydra_block(tape, x, &ids.bind(b), &stage.cfg, ser)?;
            }
            skips.push(x);
        }

        match self.cfg.task {
            Task::Recognition => {
                let x = self.layout.norm_out.apply(tape, b, x)?;
                let pooled = tape.mean_pool(x, 0)?;
                self.layout.head.apply(tape, b, pooled)
            }
            Task::Segmentation => {
                for (j, dec) in self.layout.decoder.iter().enumerate() {
                    let s = self.cfg.num_stages() - 1 - j;
                    x = geo.transitions[s - 1].up(tape, x, &geo.coords[s], &geo.coords[s - 1])?;
                    x = dec.proj.apply(tape, b, x)?;
                    x = tape.add(x, skips[s - 1])?;
                    for ids in &dec.blocks {
                        let ser =
                            serializer.get(s - 1, &geo.coords[s - 1], orders.next().expect("plan covers blocks"))?;
                        x = hydra_block(tape, x, &ids.bind(b), &dec.cfg, ser)?;
                    }
                }
                let x = self.layout.norm_out.apply(tape, b, x)?;
                self.layout.head.apply(tape, b, x)
            }
        }
    }

    /// Evaluation-mode logits: frozen parameters and the configured plan seed.
    pub fn predict(&self, pc: &PointCloud) -> Result<Tensor> {
        let tape = Tape::new();
        let b = self.store.bind_frozen(&tape);
        let y = self.forward(&tape, &b, pc, self.cfg.shuffle_seed)?;
        let out = tape.value(y).clone();
        Ok(out)
    }

    /// Predicted class per cloud (recognition) or per point (segmentation).
    pub fn classify(&self, pc: &PointCloud) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.predict(pc)?))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ckpt = Checkpoint {
            config: self.cfg.to_kv(),
            params: self
                .store
                .ids()
                .map(|id| SavedParam {
                    name: self.store.name(id).to_string(),
                    shape: self.store.get(id).shape().to_vec(),
                    data: self.store.get(id).data().to_vec(),
                })
                .collect(),
        };
        let text = serde_json::to_string(&ckpt).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let fmt = |msg: String| Error::Format {
            path: path.to_path_buf(),
            msg,
        };
        let text = std::fs::read_to_string(path)?;
        let ckpt: Checkpoint = serde_json::from_str(&text).map_err(|e| fmt(e.to_string()))?;
        let cfg = ModelConfig::from_kv(&ckpt.config)?;
        let mut model = Model::new(cfg, 0)?;
        if ckpt.params.len() != model.store.len() {
            return Err(fmt(format!(
                "checkpoint has {} tensors, config expects {}",
                ckpt.params.len(),
                model.store.len()
            )));
        }
        let ids: Vec<ParamId> = model.store.ids().collect();
        for (id, p) in ids.into_iter().zip(ckpt.params) {
            if model.store.name(id) != p.name || model.store.get(id).shape() != p.shape.as_slice() {
                return Err(fmt(format!("tensor {} does not match the config", p.name)));
            }
            *model.store.get_mut(id) = Tensor::new(&p.shape, p.data)?;
        }
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
struct SavedParam {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    config: String,
    params: Vec<SavedParam>,
}

/// Caches serializations per (stage, order) within one forward pass.
struct Serializer {
    bits: u32,
    cache: HashMap<(usize, BlockOrder), Serialization>,
}

impl Serializer {
    fn new(bits: u32) -> Self {
        Serializer {
            bits,
            cache: HashMap::new(),
        }
    }

    fn get(&mut self, stage: usize, coords: &[Point], order: &BlockOrder) -> Result<&Serialization> {
        let key = *order;
        if !self.cache.contains_key(&(stage, key)) {
            let ser = match order {
                BlockOrder::Curve(v) => serialize_coords(coords, *v, self.bits)?,
                BlockOrder::Random(seed) => Serialization::random(coords.len(), *seed),
            };
            self.cache.insert((stage, key), ser);
        }
        Ok(&self.cache[&(stage, key)])
    }
}

/// Index of the largest entry of every row (a rank-1 tensor is one row).
/// Ties go to the lowest index.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let c = *logits.shape().last().expect("non-scalar logits");
    logits
        .data()
        .chunks(c)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold(
                    (0, f64::NEG_INFINITY),
                    |best, (i, &v)| if v > best.1 { (i, v) } else { best },
                )
                .0
        })
        .collect()
}
