//! Synthetic datasets for the toy experiments.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::net::derive_seed;
use crate::error::{Error, Result};
use crate::pointio::{make_synthetic, normalize_unit_sphere, Point, PointCloud, ShapeKind, SyntheticSpec};

/// What separates the four classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ToyKind {
    /// Sphere, cube, torus and two planes.
    #[default]
    Shapes,
    /// Points on the unit sphere in tight clusters of 1, 2, 4 or 8. Every
    /// class has the same expected point density, so only the arrangement of
    /// nearby points tells them apart.
    Grouping,
}

impl std::str::FromStr for ToyKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shapes" => Ok(ToyKind::Shapes),
            "grouping" => Ok(ToyKind::Grouping),
            _ => Err(Error::Config(format!("unknown toy task kind {s:?}"))),
        }
    }
}

impl std::fmt::Display for ToyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ToyKind::Shapes => "shapes",
            ToyKind::Grouping => "grouping",
        })
    }
}

/// Radius of the tangent disk holding one cluster, on the unit sphere.
pub const GROUP_RADIUS: f64 = 0.05;

/// A four-class synthetic recognition task.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyTask {
    pub kind: ToyKind,
    pub n_points: usize,
    pub noise_sigma: f64,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub seed: u64,
    /// Apply a uniformly random rotation to every cloud.
    pub rotate: bool,
    /// Per-axis scale factors are drawn from `[1 - a, 1 + a]`.
    pub anisotropy: f64,
}

impl Default for ToyTask {
    /// 256 points per cloud, 400 training and 100 test clouds.
    fn default() -> Self {
        ToyTask {
            kind: ToyKind::Shapes,
            n_points: 256,
            noise_sigma: 0.02,
            train_per_class: 100,
            test_per_class: 25,
            seed: 0,
            rotate: false,
            anisotropy: 0.0,
        }
    }
}

/// Rotation matrix from a random unit quaternion.
fn random_rotation(rng: &mut impl Rng) -> [[f64; 3]; 3] {
    let mut q: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    q.iter_mut().for_each(|v| *v /= n);
    let [w, x, y, z] = q;
    [
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
        ],
        [
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
        ],
        [
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ]
}

impl ToyTask {
    pub fn validate(&self) -> Result<()> {
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return Err(Error::Config("toy task needs clouds in both splits".into()));
        }
        if !(0.0..1.0).contains(&self.anisotropy) {
            return Err(Error::Config(format!(
                "anisotropy must lie in [0, 1), got {}",
                self.anisotropy
            )));
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        4
    }

    /// Cloud `index` of `split` (0 = train, 1 = test); classes interleave.
    pub fn cloud(&self, split: u64, index: usize) -> Result<PointCloud> {
        let class = index % self.num_classes();
        let seed = derive_seed(self.seed, &[split, index as u64]);
        let mut pc = match self.kind {
            ToyKind::Shapes => make_synthetic(&SyntheticSpec {
                shape_kind: ShapeKind::ALL[class],
                n_points: self.n_points,
                noise_sigma: self.noise_sigma,
                seed,
            })?,
            ToyKind::Grouping => grouped_sphere(class, self.n_points, self.noise_sigma, seed)?,
        };
        pc.class_id = Some(class);
        if self.rotate || self.anisotropy > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[1]));
            let r = if self.rotate {
                random_rotation(&mut rng)
            } else {
                [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
            };
            let a = self.anisotropy;
            let scale: [f64; 3] = std::array::from_fn(|_| 1.0 + rng.random_range(-a..=a));
            for p in &mut pc.coords {
                let s = [p[0] * scale[0], p[1] * scale[1], p[2] * scale[2]];
                *p = std::array::from_fn(|i| r[i][0] * s[0] + r[i][1] * s[1] + r[i][2] * s[2]);
            }
        }
        Ok(normalize_unit_sphere(&pc))
    }

    /// `(train, test)` clouds.
    pub fn split(&self) -> Result<(Vec<PointCloud>, Vec<PointCloud>)> {
        self.validate()?;
        let k = self.num_classes();
        let train = (0..self.train_per_class * k)
            .map(|i| self.cloud(0, i))
            .collect::<Result<Vec<_>>>()?;
        let test = (0..self.test_per_class * k)
            .map(|i| self.cloud(1, i))
            .collect::<Result<Vec<_>>>()?;
        Ok((train, test))
    }
}

/// Points on the unit sphere in clusters of `2^class`, each drawn uniformly
/// from a tangent disk around a uniformly placed center. The input order is
/// shuffled.
fn grouped_sphere(class: usize, n_points: usize, noise_sigma: f64, seed: u64) -> Result<PointCloud> {
    if n_points < 8 {
        return Err(Error::Contract("synthetic clouds need at least 8 points".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = 1usize << class;
    let mut coords: Vec<Point> = Vec::with_capacity(n_points + size);
    while coords.len() < n_points {
        let c = unit(std::array::from_fn(|_| rng.sample(StandardNormal)));
        let helper = if c[0].abs() < 0.9 {
            [1.0, 0.0, 0.0]
        } else {
            [0.0, 1.0, 0.0]
        };
        let u = unit(cross(c, helper));
        let v = cross(c, u);
        for _ in 0..size {
            let r = GROUP_RADIUS * rng.random::<f64>().sqrt();
            let (s, co) = rng.random_range(0.0..std::f64::consts::TAU).sin_cos();
            let p: Point = std::array::from_fn(|k| c[k] + r * (co * u[k] + s * v[k]));
            coords.push(if size == 1 { c } else { unit(p) });
        }
    }
    coords.truncate(n_points);
    for p in &mut coords {
        for x in p.iter_mut() {
            *x += noise_sigma * rng.sample::<f64, _>(StandardNormal);
        }
    }
    coords.shuffle(&mut rng);
    let mut pc = PointCloud::new(coords)?;
    pc.class_id = Some(class);
    Ok(pc)
}

fn cross(a: Point, b: Point) -> Point {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn unit(a: Point) -> Point {
    let n = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
    a.map(|x| x / n)
}

/// Noisy cube surfaces with every point labeled by the axis of its face
/// (three classes). Telling faces apart needs local geometry.
pub fn cube_faces(count: usize, n_points: usize, noise_sigma: f64, seed: u64) -> Result<Vec<PointCloud>> {
    (0..count)
        .map(|i| {
            let mut pc = make_synthetic(&SyntheticSpec {
                shape_kind: ShapeKind::Cube,
                n_points,
                noise_sigma: 0.0,
                seed: derive_seed(seed, &[i as u64]),
            })?;
            let labels = pc
                .coords
                .iter()
                .map(|p| {
                    (0..3)
                        .max_by(|&a, &b| p[a].abs().total_cmp(&p[b].abs()))
                        .expect("three axes")
                })
                .collect();
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[i as u64, 1]));
            for p in &mut pc.coords {
                for v in p.iter_mut() {
                    *v += noise_sigma * rng.sample::<f64, _>(StandardNormal);
                }
            }
            pc.labels = Some(labels);
            pc.class_id = None;
            Ok(normalize_unit_sphere(&pc))
        })
        .collect()
}
