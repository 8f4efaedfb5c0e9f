//! Space-filling curve codecs (Hilbert, Z-order) in 3D with all six axis
//! priorities, point-cloud serialization, and per-block curve assignment.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::pointio::{Point, PointCloud};

pub const MAX_BITS: u32 = 20;
pub const DEFAULT_BITS: u32 = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Curve {
    Hilbert,
    Zorder,
}

/// Traversal priority of the three axes; the first named axis is the most
/// significant one seen by the base codec.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AxisPriority {
    Xyz,
    Yxz,
    Xzy,
    Zxy,
    Yzx,
    Zyx,
}

impl AxisPriority {
    pub const ALL: [AxisPriority; 6] = [
        AxisPriority::Xyz,
        AxisPriority::Yxz,
        AxisPriority::Xzy,
        AxisPriority::Zxy,
        AxisPriority::Yzx,
        AxisPriority::Zyx,
    ];

    /// Source axis feeding each codec slot.
    pub fn order(self) -> [usize; 3] {
        match self {
            AxisPriority::Xyz => [0, 1, 2],
            AxisPriority::Yxz => [1, 0, 2],
            AxisPriority::Xzy => [0, 2, 1],
            AxisPriority::Zxy => [2, 0, 1],
            AxisPriority::Yzx => [1, 2, 0],
            AxisPriority::Zyx => [2, 1, 0],
        }
    }

    fn name(self) -> &'static str {
        match self {
            AxisPriority::Xyz => "xyz",
            AxisPriority::Yxz => "yxz",
            AxisPriority::Xzy => "xzy",
            AxisPriority::Zxy => "zxy",
            AxisPriority::Yzx => "yzx",
            AxisPriority::Zyx => "zyx",
        }
    }
}

impl fmt::Display for AxisPriority {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AxisPriority {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        AxisPriority::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown axis priority {s:?}")))
    }
}

impl fmt::Display for Curve {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Curve::Hilbert => "hilbert",
            Curve::Zorder => "zorder",
        })
    }
}

impl FromStr for Curve {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hilbert" => Ok(Curve::Hilbert),
            "zorder" | "z-order" => Ok(Curve::Zorder),
            _ => Err(Error::Config(format!("unknown curve {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CurveVariant {
    pub curve: Curve,
    pub priority: AxisPriority,
}

impl CurveVariant {
    pub const fn new(curve: Curve, priority: AxisPriority) -> Self {
        CurveVariant { curve, priority }
    }

    pub const fn hilbert(priority: AxisPriority) -> Self {
        CurveVariant::new(Curve::Hilbert, priority)
    }

    pub fn encode(self, cell: [u32; 3], bits: u32) -> Result<u64> {
        let uvw = apply_variant(cell, self.priority);
        match self.curve {
            Curve::Hilbert => hilbert_encode(uvw, bits),
            Curve::Zorder => zorder_encode(uvw, bits),
        }
    }

    pub fn decode(self, index: u64, bits: u32) -> Result<[u32; 3]> {
        let uvw = match self.curve {
            Curve::Hilbert => hilbert_decode(index, bits)?,
            Curve::Zorder => zorder_decode(index, bits)?,
        };
        Ok(unapply_variant(uvw, self.priority))
    }
}

impl fmt::Display for CurveVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}_{}", self.curve, self.priority)
    }
}

impl FromStr for CurveVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let (c, p) = s
            .split_once('_')
            .ok_or_else(|| Error::Config(format!("expected <curve>_<priority>, got {s:?}")))?;
        Ok(CurveVariant::new(c.parse()?, p.parse()?))
    }
}

/// Hilbert variants in sequential-assignment order.
pub const HILBERT_VARIANTS: [CurveVariant; 6] = [
    CurveVariant::hilbert(AxisPriority::Xyz),
    CurveVariant::hilbert(AxisPriority::Yxz),
    CurveVariant::hilbert(AxisPriority::Xzy),
    CurveVariant::hilbert(AxisPriority::Zxy),
    CurveVariant::hilbert(AxisPriority::Yzx),
    CurveVariant::hilbert(AxisPriority::Zyx),
];

/// Permute `(x, y, z)` so the codec sees axes in priority order.
pub fn apply_variant(cell: [u32; 3], priority: AxisPriority) -> [u32; 3] {
    let o = priority.order();
    [cell[o[0]], cell[o[1]], cell[o[2]]]
}

pub fn unapply_variant(uvw: [u32; 3], priority: AxisPriority) -> [u32; 3] {
    let o = priority.order();
    let mut cell = [0; 3];
    for (k, &axis) in o.iter().enumerate() {
        cell[axis] = uvw[k];
    }
    cell
}

fn check_bits(bits: u32) -> Result<()> {
    if !(1..=MAX_BITS).contains(&bits) {
        return Err(contract(format!("curve order {bits} outside 1..={MAX_BITS}")));
    }
    Ok(())
}

fn check_cell(cell: [u32; 3], bits: u32) -> Result<()> {
    check_bits(bits)?;
    if let Some(&v) = cell.iter().find(|&&v| v >> bits != 0) {
        return Err(Error::Range { value: v, bits });
    }
    Ok(())
}

fn check_index(index: u64, bits: u32) -> Result<()> {
    check_bits(bits)?;
    if index >> (3 * bits) != 0 {
        return Err(contract(format!("curve index {index} out of range for order {bits}")));
    }
    Ok(())
}

/// Interleave the "transposed" form: bit `b` of word `i` becomes bit
/// `3*b + (2 - i)` of the index.
fn interleave(x: [u32; 3], bits: u32) -> u64 {
    let mut index = 0u64;
    for b in (0..bits).rev() {
        for &w in &x {
            index = (index << 1) | u64::from((w >> b) & 1);
        }
    }
    index
}

fn deinterleave(index: u64, bits: u32) -> [u32; 3] {
    let mut x = [0u32; 3];
    for b in 0..bits {
        for (i, w) in x.iter_mut().enumerate() {
            let shift = 3 * b + (2 - i as u32);
            *w |= (((index >> shift) & 1) as u32) << b;
        }
    }
    x
}

/// Hilbert index of a cell, via the transpose construction (Skilling 2004).
/// Index 0 is cell `(0, 0, 0)`.
pub fn hilbert_encode(cell: [u32; 3], bits: u32) -> Result<u64> {
    check_cell(cell, bits)?;
    let mut x = cell;
    let m = 1u32 << (bits - 1);

    // Inverse undo.
    let mut q = m;
    while q > 1 {
        let p = q - 1;
        for i in 0..3 {
            if x[i] & q != 0 {
                x[0] ^= p;
            } else {
                let t = (x[0] ^ x[i]) & p;
                x[0] ^= t;
                x[i] ^= t;
            }
        }
        q >>= 1;
    }

    // Gray encode.
    for i in 1..3 {
        x[i] ^= x[i - 1];
    }
    let mut t = 0;
    let mut q = m;
    while q > 1 {
        if x[2] & q != 0 {
            t ^= q - 1;
        }
        q >>= 1;
    }
    for w in &mut x {
        *w ^= t;
    }

    Ok(interleave(x, bits))
}

pub fn hilbert_decode(index: u64, bits: u32) -> Result<[u32; 3]> {
    check_index(index, bits)?;
    let mut x = deinterleave(index, bits);
    let n = 2u32 << (bits - 1);

    // Gray decode.
    let t = x[2] >> 1;
    for i in (1..3).rev() {
        x[i] ^= x[i - 1];
    }
    x[0] ^= t;

    // Undo excess work.
    let mut q = 2u32;
    while q != n {
        let p = q - 1;
        for i in (0..3).rev() {
            if x[i] & q != 0 {
                x[0] ^= p;
            } else {
                let t = (x[0] ^ x[i]) & p;
                x[0] ^= t;
                x[i] ^= t;
            }
        }
        q <<= 1;
    }
    Ok(x)
}

/// Morton interleave; the first coordinate occupies the most significant bit
/// of every 3-bit group.
pub fn zorder_encode(cell: [u32; 3], bits: u32) -> Result<u64> {
    check_cell(cell, bits)?;
    Ok(interleave(cell, bits))
}

pub fn zorder_decode(index: u64, bits: u32) -> Result<[u32; 3]> {
    check_index(index, bits)?;
    Ok(deinterleave(index, bits))
}

/// Map each point onto the `2^bits` grid spanning the cloud's bounding box.
/// An axis with zero extent maps every point to cell 0.
pub fn quantize(coords: &[Point], bits: u32) -> Result<Vec<[u32; 3]>> {
    check_bits(bits)?;
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in coords {
        for k in 0..3 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    let cells = f64::from(1u32 << bits);
    let top = (1u32 << bits) - 1;
    Ok(coords
        .iter()
        .map(|p| {
            let mut c = [0u32; 3];
            for k in 0..3 {
                let extent = hi[k] - lo[k];
                if extent > 0.0 {
                    let v = ((p[k] - lo[k]) / extent * cells).floor();
                    c[k] = (v.max(0.0) as u32).min(top);
                }
            }
            c
        })
        .collect())
}

/// A point order and its inverse. `variant` is `None` for a random order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Serialization {
    pub perm: Vec<usize>,
    pub inv_perm: Vec<usize>,
    pub variant: Option<CurveVariant>,
    pub bits: u32,
}

impl Serialization {
    pub fn from_perm(perm: Vec<usize>, variant: Option<CurveVariant>, bits: u32) -> Self {
        let mut inv_perm = vec![0; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inv_perm[p] = i;
        }
        Serialization {
            perm,
            inv_perm,
            variant,
            bits,
        }
    }

    pub fn identity(n: usize) -> Self {
        Serialization::from_perm((0..n).collect(), None, 0)
    }

    /// A uniformly random order, used as the "no curve" baseline.
    pub fn random(n: usize, seed: u64) -> Self {
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        Serialization::from_perm(perm, None, 0)
    }

    pub fn len(&self) -> usize {
        self.perm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perm.is_empty()
    }

    pub fn is_valid(&self) -> bool {
        let n = self.perm.len();
        let mut seen = vec![false; n];
        for &p in &self.perm {
            if p >= n || std::mem::replace(&mut seen[p], true) {
                return false;
            }
        }
        self.inv_perm.len() == n && self.perm.iter().enumerate().all(|(i, &p)| self.inv_perm[p] == i)
    }
}

pub fn serialize_coords(coords: &[Point], variant: CurveVariant, bits: u32) -> Result<Serialization> {
    if coords.is_empty() {
        return Err(contract("cannot serialize an empty cloud"));
    }
    let cells = quantize(coords, bits)?;
    let keys = cells
        .iter()
        .map(|&c| variant.encode(c, bits))
        .collect::<Result<Vec<u64>>>()?;
    let mut perm: Vec<usize> = (0..coords.len()).collect();
    // sort_by_key is stable: ties keep original index order.
    perm.sort_by_key(|&i| keys[i]);
    Ok(Serialization::from_perm(perm, Some(variant), bits))
}

/// Order the points of `pc` along `variant` at grid resolution `bits`.
pub fn serialize(pc: &PointCloud, variant: CurveVariant, bits: u32) -> Result<Serialization> {
    serialize_coords(&pc.coords, variant, bits)
}

/// Mean Euclidean distance between consecutive points of a serialization.
pub fn mean_neighbor_distance(coords: &[Point], perm: &[usize]) -> f64 {
    if perm.len() < 2 {
        return 0.0;
    }
    let total: f64 = perm
        .windows(2)
        .map(|w| {
            let (a, b) = (coords[w[0]], coords[w[1]]);
            ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
        })
        .sum();
    total / (perm.len() - 1) as f64
}

/// Every curve/priority combination, Hilbert first.
pub fn all_variants() -> Vec<CurveVariant> {
    [Curve::Hilbert, Curve::Zorder]
        .into_iter()
        .flat_map(|c| AxisPriority::ALL.into_iter().map(move |p| CurveVariant::new(c, p)))
        .collect()
}

/// `n` points drawn uniformly from the unit cube.
pub fn random_cloud(n: usize, seed: u64) -> Vec<Point> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| std::array::from_fn(|_| rng.random::<f64>())).collect()
}

/// Mean consecutive-neighbor distance of one random cloud under every variant.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LocalityTrial {
    pub seed: u64,
    pub n: usize,
    pub distances: Vec<(CurveVariant, f64)>,
}

impl LocalityTrial {
    /// Average over the six priorities of `curve`.
    pub fn curve_mean(&self, curve: Curve) -> f64 {
        let d: Vec<f64> = self
            .distances
            .iter()
            .filter(|(v, _)| v.curve == curve)
            .map(|&(_, d)| d)
            .collect();
        d.iter().sum::<f64>() / d.len() as f64
    }

    pub fn hilbert_wins(&self) -> bool {
        self.curve_mean(Curve::Hilbert) < self.curve_mean(Curve::Zorder)
    }
}

pub fn locality_trial(n: usize, seed: u64, bits: u32) -> Result<LocalityTrial> {
    let coords = random_cloud(n, seed);
    let distances = all_variants()
        .into_iter()
        .map(|v| {
            Ok((
                v,
                mean_neighbor_distance(&coords, &serialize_coords(&coords, v, bits)?.perm),
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LocalityTrial { seed, n, distances })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShuffleMode {
    Shuffle,
    Sequential,
    Fixed,
}

impl FromStr for ShuffleMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shuffle" => Ok(ShuffleMode::Shuffle),
            "sequential" => Ok(ShuffleMode::Sequential),
            "fixed" => Ok(ShuffleMode::Fixed),
            _ => Err(Error::Config(format!("unknown shuffle mode {s:?}"))),
        }
    }
}

/// One curve variant per block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShufflePlan {
    pub assignments: Vec<CurveVariant>,
    pub seed: u64,
    pub mode: ShuffleMode,
}

/// Assign Hilbert variants to `num_blocks` blocks: i.i.d. uniform draws
/// (shuffle), a cycle through [`HILBERT_VARIANTS`] (sequential), or
/// `hilbert_xyz` everywhere (fixed).
pub fn make_shuffle_plan(num_blocks: usize, seed: u64, mode: ShuffleMode) -> Result<ShufflePlan> {
    make_shuffle_plan_from(num_blocks, seed, mode, &HILBERT_VARIANTS)
}

/// As [`make_shuffle_plan`] with a restricted set of enabled variants.
pub fn make_shuffle_plan_from(
    num_blocks: usize,
    seed: u64,
    mode: ShuffleMode,
    enabled: &[CurveVariant],
) -> Result<ShufflePlan> {
    if num_blocks == 0 {
        return Err(contract("a shuffle plan needs at least one block"));
    }
    if enabled.is_empty() {
        return Err(contract("no curve variants enabled"));
    }
    let assignments = match mode {
        ShuffleMode::Shuffle => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..num_blocks)
                .map(|_| enabled[rng.random_range(0..enabled.len())])
                .collect()
        }
        ShuffleMode::Sequential => (0..num_blocks).map(|i| enabled[i % enabled.len()]).collect(),
        ShuffleMode::Fixed => vec![enabled[0]; num_blocks],
    };
    Ok(ShufflePlan {
        assignments,
        seed,
        mode,
    })
}
