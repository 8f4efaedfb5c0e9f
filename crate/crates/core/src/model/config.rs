//! Model configuration and its flat `key = value` file format.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::blocks::{BlockConfig, ConvKind};
use crate::error::{Error, Result};
use crate::spacefill::{ShuffleMode, DEFAULT_BITS, MAX_BITS};
use crate::sscan::ScanMode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Recognition,
    Segmentation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransitionKind {
    /// Farthest point sampling down, interpolation up.
    Fps,
    /// Grid pooling down, unpooling up.
    Grid,
}

/// How each block orders its points.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OrderStrategy {
    /// Random Hilbert variant per block.
    Shuffle,
    /// Hilbert variants cycled block by block.
    Sequential,
    /// `hilbert_xyz` everywhere.
    Fixed,
    /// A uniformly random permutation per block, no curve at all.
    None,
}

impl OrderStrategy {
    pub fn shuffle_mode(self) -> Option<ShuffleMode> {
        match self {
            OrderStrategy::Shuffle => Some(ShuffleMode::Shuffle),
            OrderStrategy::Sequential => Some(ShuffleMode::Sequential),
            OrderStrategy::Fixed => Some(ShuffleMode::Fixed),
            OrderStrategy::None => None,
        }
    }
}

macro_rules! keyword_enum {
    ($ty:ty, $what:literal, $($s:literal => $v:expr),+ $(,)?) => {
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($s => Ok($v),)+
                    _ => Err(Error::Config(format!(concat!("unknown ", $what, " {:?}"), s))),
                }
            }
        }
        impl std::fmt::Display for $ty {
            fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                $(if *self == $v { return f.write_str($s); })+
                unreachable!()
            }
        }
    };
}

keyword_enum!(Task, "task", "recognition" => Task::Recognition, "segmentation" => Task::Segmentation);
keyword_enum!(TransitionKind, "transition", "fps" => TransitionKind::Fps, "grid" => TransitionKind::Grid);
keyword_enum!(OrderStrategy, "serialization strategy",
    "shuffle" => OrderStrategy::Shuffle,
    "sequential" => OrderStrategy::Sequential,
    "fixed" => OrderStrategy::Fixed,
    "none" => OrderStrategy::None,
);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub task: Task,
    pub num_classes: usize,
    /// Extra per-point feature columns beyond xyz.
    pub in_features: usize,
    /// Blocks per encoder stage.
    pub stage_blocks: Vec<usize>,
    /// Width per encoder stage.
    pub stage_dims: Vec<usize>,
    /// Heads at the first stage; later stages scale with their width.
    pub heads: usize,
    pub transition: TransitionKind,
    /// FPS keeps `ceil(n / downsample)` points per transition.
    pub downsample: usize,
    /// Voxel edge of the first grid transition, doubled per stage.
    pub grid_size: f64,
    pub k_neighbors: usize,
    pub state_dim: usize,
    pub bits: u32,
    pub serialization: OrderStrategy,
    pub shuffle_seed: u64,
    pub conv_kind: ConvKind,
    pub conv_kernel: usize,
    pub conv_branch: bool,
    pub bidirectional: bool,
    pub ffn_ratio: usize,
    /// Blocks after every transition up (segmentation only).
    pub decoder_blocks: usize,
    /// 0 selects the sequential scan.
    pub scan_chunk: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            task: Task::Recognition,
            num_classes: 4,
            in_features: 0,
            stage_blocks: vec![2, 2],
            stage_dims: vec![48, 48],
            heads: 6,
            transition: TransitionKind::Fps,
            downsample: 2,
            grid_size: 0.1,
            k_neighbors: 3,
            state_dim: 8,
            bits: DEFAULT_BITS,
            serialization: OrderStrategy::Shuffle,
            shuffle_seed: 0,
            conv_kind: ConvKind::Depthwise,
            conv_kernel: 7,
            conv_branch: true,
            bidirectional: true,
            ffn_ratio: 4,
            decoder_blocks: 1,
            scan_chunk: 0,
        }
    }
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',').map(|s| parse_one(key, s.trim())).collect()
}

fn parse_one<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("bad value {v:?} for key {key}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "on" | "1" | "yes" => Ok(true),
        "false" | "off" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("bad value {v:?} for key {key}"))),
    }
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

impl ModelConfig {
    /// The small recognition model used for the toy experiments.
    pub fn toy() -> Self {
        ModelConfig::default()
    }

    /// Smallest model that still exercises every component.
    pub fn tiny() -> Self {
        ModelConfig {
            stage_blocks: vec![1, 1],
            stage_dims: vec![12, 12],
            heads: 3,
            state_dim: 4,
            conv_kernel: 3,
            ffn_ratio: 2,
            ..ModelConfig::default()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(Self::toy()),
            "tiny" => Ok(Self::tiny()),
            "tiny-seg" => Ok(ModelConfig {
                task: Task::Segmentation,
                num_classes: 3,
                ..Self::tiny()
            }),
            _ => Err(Error::Config(format!("unknown preset {name:?}"))),
        }
    }

    pub fn num_stages(&self) -> usize {
        self.stage_dims.len()
    }

    /// Head count of stage `s`, proportional to its width.
    pub fn stage_heads(&self, s: usize) -> usize {
        self.heads * self.stage_dims[s] / self.stage_dims[0]
    }

    pub fn scan_mode(&self) -> ScanMode {
        match self.scan_chunk {
            0 => ScanMode::Sequential,
            c => ScanMode::Chunked(c),
        }
    }

    pub fn block_config(&self, s: usize) -> BlockConfig {
        BlockConfig {
            conv_kernel: self.conv_kernel,
            ffn_ratio: self.ffn_ratio,
            conv_kind: self.conv_kind,
            bidirectional: self.bidirectional,
            conv_branch: self.conv_branch,
            scan_mode: self.scan_mode(),
            ..BlockConfig::new(self.stage_dims[s], self.state_dim, self.stage_heads(s))
        }
    }

    pub fn num_decoder_stages(&self) -> usize {
        match self.task {
            Task::Recognition => 0,
            Task::Segmentation => self.num_stages() - 1,
        }
    }

    /// Blocks that receive a serialization, encoder first then decoder.
    pub fn total_blocks(&self) -> usize {
        self.stage_blocks.iter().sum::<usize>() + self.decoder_blocks * self.num_decoder_stages()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.num_classes));
        }
        if self.stage_dims.is_empty() || self.stage_dims.len() != self.stage_blocks.len() {
            return bad(format!(
                "stage_blocks ({}) and stage_dims ({}) must be non-empty and equally long",
                self.stage_blocks.len(),
                self.stage_dims.len()
            ));
        }
        if self.heads == 0 {
            return bad("heads must be positive".into());
        }
        for (s, &d) in self.stage_dims.iter().enumerate() {
            if d == 0 || !(self.heads * d).is_multiple_of(self.stage_dims[0]) {
                return bad(format!(
                    "stage {s} width {d} does not scale {} heads at width {} to a whole count",
                    self.heads, self.stage_dims[0]
                ));
            }
            self.block_config(s).validate()?;
        }
        if self.transition == TransitionKind::Fps && self.downsample < 1 {
            return bad("downsample must be at least 1".into());
        }
        if self.transition == TransitionKind::Grid && !(self.grid_size > 0.0 && self.grid_size.is_finite()) {
            return bad(format!("grid_size must be positive, got {}", self.grid_size));
        }
        if self.k_neighbors == 0 {
            return bad("k_neighbors must be positive".into());
        }
        if !(1..=MAX_BITS).contains(&self.bits) {
            return bad(format!("bits must lie in 1..={MAX_BITS}, got {}", self.bits));
        }
        Ok(())
    }

    /// Apply one `key = value` setting.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "task" => self.task = v.parse()?,
            "num_classes" => self.num_classes = parse_one(key, v)?,
            "in_features" => self.in_features = parse_one(key, v)?,
            "stage_blocks" => self.stage_blocks = parse_list(key, v)?,
            "stage_dims" => self.stage_dims = parse_list(key, v)?,
            "heads" => self.heads = parse_one(key, v)?,
            "transition" | "downsample_kind" => self.transition = v.parse()?,
            "downsample" => self.downsample = parse_one(key, v)?,
            "grid_size" => self.grid_size = parse_one(key, v)?,
            "k_neighbors" => self.k_neighbors = parse_one(key, v)?,
            "state_dim" => self.state_dim = parse_one(key, v)?,
            "bits" => self.bits = parse_one(key, v)?,
            "serialization" => self.serialization = v.parse()?,
            "shuffle_seed" => self.shuffle_seed = parse_one(key, v)?,
            "conv_kind" => self.conv_kind = v.parse()?,
            "conv_kernel" => self.conv_kernel = parse_one(key, v)?,
            "conv_branch" => self.conv_branch = parse_bool(key, v)?,
            "bidirectional" => self.bidirectional = parse_bool(key, v)?,
            "ffn_ratio" => self.ffn_ratio = parse_one(key, v)?,
            "decoder_blocks" => self.decoder_blocks = parse_one(key, v)?,
            "scan_chunk" => self.scan_chunk = parse_one(key, v)?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Parse settings on top of the defaults. Blank lines and `#` comments
    /// are skipped; unknown keys are errors.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        for (no, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", no + 1)))?;
            cfg.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", no + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_kv(&std::fs::read_to_string(path)?)
    }

    /// Every key with its resolved value, in the file format.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("task", self.task.to_string());
        put("num_classes", self.num_classes.to_string());
        put("in_features", self.in_features.to_string());
        put("stage_blocks", join(&self.stage_blocks));
        put("stage_dims", join(&self.stage_dims));
        put("heads", self.heads.to_string());
        put("transition", self.transition.to_string());
        put("downsample", self.downsample.to_string());
        put("grid_size", self.grid_size.to_string());
        put("k_neighbors", self.k_neighbors.to_string());
        put("state_dim", self.state_dim.to_string());
        put("bits", self.bits.to_string());
        put("serialization", self.serialization.to_string());
        put("shuffle_seed", self.shuffle_seed.to_string());
        put("conv_kind", self.conv_kind.to_string());
        put("conv_kernel", self.conv_kernel.to_string());
        put("conv_branch", self.conv_branch.to_string());
        put("bidirectional", self.bidirectional.to_string());
        put("ffn_ratio", self.ffn_ratio.to_string());
        put("decoder_blocks", self.decoder_blocks.to_string());
        put("scan_chunk", self.scan_chunk.to_string());
        s
    }
}
