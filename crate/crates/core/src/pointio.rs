//! Point cloud payloads, the `.xyz` text format and labelled synthetic shapes.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};

pub type Point = [f64; 3];

/// Coordinates plus optional per-point features and labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    pub coords: Vec<Point>,
    /// Row-major `n x c` feature matrix.
    pub features: Option<Vec<Vec<f64>>>,
    pub labels: Option<Vec<usize>>,
    pub class_id: Option<usize>,
}

impl PointCloud {
    pub fn new(coords: Vec<Point>) -> Result<Self> {
        let pc = PointCloud {
            coords,
            features: None,
            labels: None,
            class_id: None,
        };
        pc.validate()?;
        Ok(pc)
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    /// Number of extra feature columns (0 when absent).
    pub fn feature_dim(&self) -> usize {
        self.features
            .as_ref()
            .and_then(|f| f.first().map(Vec::len))
            .unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.coords.is_empty() {
            return Err(contract("point cloud must hold at least one point"));
        }
        if let Some(i) = self.coords.iter().position(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(contract(format!("non-finite coordinate at point {i}")));
        }
        if let Some(f) = &self.features {
            if f.len() != self.coords.len() {
                return Err(contract(format!(
                    "{} feature rows for {} points",
                    f.len(),
                    self.coords.len()
                )));
            }
            let c = self.feature_dim();
            if f.iter().any(|row| row.len() != c) {
                return Err(contract("ragged feature rows"));
            }
        }
        if let Some(l) = &self.labels {
            if l.len() != self.coords.len() {
                return Err(contract(format!("{} labels for {} points", l.len(), self.coords.len())));
            }
        }
        Ok(())
    }

    /// Keep only the rows in `idx`, in that order.
    pub fn select(&self, idx: &[usize]) -> PointCloud {
        PointCloud {
            coords: idx.iter().map(|&i| self.coords[i]).collect(),
            features: self
                .features
                .as_ref()
                .map(|f| idx.iter().map(|&i| f[i].clone()).collect()),
            labels: self.labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect()),
            class_id: self.class_id,
        }
    }
}

/// Parse a whitespace-separated `x y z [f1 .. fc]` file. Lines starting with
/// `#` and blank lines are skipped.
pub fn load_xyz(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    parse_xyz(&text, path)
}

pub fn parse_xyz(text: &str, path: &Path) -> Result<PointCloud> {
    let mut coords = Vec::new();
    let mut features: Vec<Vec<f64>> = Vec::new();
    let mut width: Option<(usize, usize)> = None;

    for (lineno, line) in text.lines().enumerate() {
        let lineno = lineno + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let mut vals = Vec::new();
        for tok in trimmed.split_whitespace() {
            let v: f64 = tok.parse().map_err(|_| Error::Parse {
                path: path.to_owned(),
                line: lineno,
                msg: format!("not a number: {tok:?}"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    path: path.to_owned(),
                    line: lineno,
                    msg: format!("non-finite value {tok:?}"),
                });
            }
            vals.push(v);
        }
        if vals.len() < 3 {
            return Err(Error::Parse {
                path: path.to_owned(),
                line: lineno,
                msg: format!("expected at least 3 columns, found {}", vals.len()),
            });
        }
        match width {
            None => width = Some((vals.len(), lineno)),
            Some((w, first)) if w != vals.len() => {
                return Err(Error::Format {
                    path: path.to_owned(),
                    msg: format!("line {lineno} has {} columns but line {first} has {w}", vals.len()),
                })
            }
            Some(_) => {}
        }
        coords.push([vals[0], vals[1], vals[2]]);
        if vals.len() > 3 {
            features.push(vals[3..].to_vec());
        }
    }

    if coords.is_empty() {
        return Err(Error::EmptyInput(path.to_owned()));
    }
    Ok(PointCloud {
        features: (!features.is_empty()).then_some(features),
        coords,
        labels: None,
        class_id: None,
    })
}

/// Render in `.xyz` form with 17 significant digits, so doubles survive a
/// round trip bit for bit.
pub fn format_xyz(pc: &PointCloud) -> String {
    let mut out = String::with_capacity(pc.len() * 80);
    for (i, p) in pc.coords.iter().enumerate() {
        let _ = write!(out, "{:.16e} {:.16e} {:.16e}", p[0], p[1], p[2]);
        if let Some(f) = &pc.features {
            for v in &f[i] {
                let _ = write!(out, " {v:.16e}");
            }
        }
        out.push('\n');
    }
    out
}

pub fn save_xyz(pc: &PointCloud, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, format_xyz(pc))?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShapeKind {
    Sphere,
    Cube,
    Torus,
    TwoPlanes,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [
        ShapeKind::Sphere,
        ShapeKind::Cube,
        ShapeKind::Torus,
        ShapeKind::TwoPlanes,
    ];

    pub fn ordinal(self) -> usize {
        self as usize
    }
}

// Torus radii and plane geometry, chosen so every ideal surface has unit
// max-radius about the origin.
pub const TORUS_MAJOR: f64 = 0.7;
pub const TORUS_MINOR: f64 = 0.3;
pub const PLANE_OFFSET: f64 = 0.4;

pub fn cube_half_side() -> f64 {
    1.0 / 3f64.sqrt()
}

pub fn plane_half_width() -> f64 {
    ((1.0 - PLANE_OFFSET * PLANE_OFFSET) / 2.0).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub shape_kind: ShapeKind,
    pub n_points: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

/// Sample `n_points` from the ideal surface of `shape_kind` (centered at the
/// origin, unit max-radius) and perturb with isotropic Gaussian noise.
pub fn make_synthetic(spec: &SyntheticSpec) -> Result<PointCloud> {
    if spec.n_points < 8 {
        return Err(contract("synthetic clouds need at least 8 points"));
    }
    if !(spec.noise_sigma >= 0.0) {
        return Err(contract("noise_sigma must be non-negative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut coords: Vec<Point> = (0..spec.n_points)
        .map(|_| sample_surface(spec.shape_kind, &mut rng))
        .collect();
    if spec.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, spec.noise_sigma).expect("sigma checked above");
        for p in &mut coords {
            for v in p.iter_mut() {
                *v += noise.sample(&mut rng);
            }
        }
    }
    Ok(PointCloud {
        coords,
        features: None,
        labels: None,
        class_id: Some(spec.shape_kind.ordinal()),
    })
}

fn sample_surface(kind: ShapeKind, rng: &mut impl Rng) -> Point {
    use std::f64::consts::TAU;
    match kind {
        ShapeKind::Sphere => loop {
            let v: [f64; 3] = [
                StandardNormal.sample(rng),
                StandardNormal.sample(rng),
                StandardNormal.sample(rng),
            ];
            let r = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            if r > 1e-12 {
                break [v[0] / r, v[1] / r, v[2] / r];
            }
        },
        ShapeKind::Cube => {
            let s = cube_half_side();
            let face = rng.random_range(0..6usize);
            let axis = face / 2;
            let sign = if face % 2 == 0 { -1.0 } else { 1.0 };
            let mut p = [0.0; 3];
            for (k, v) in p.iter_mut().enumerate() {
                *v = if k == axis { sign * s } else { rng.random_range(-s..s) };
            }
            p
        }
        ShapeKind::Torus => {
            // Rejection on the tube angle gives area-uniform samples.
            let (u, v) = loop {
                let u = rng.random_range(0.0..TAU);
                let v = rng.random_range(0.0..TAU);
                let w = (TORUS_MAJOR + TORUS_MINOR * v.cos()) / (TORUS_MAJOR + TORUS_MINOR);
                if rng.random::<f64>() < w {
                    break (u, v);
                }
            };
            let ring = TORUS_MAJOR + TORUS_MINOR * v.cos();
            [ring * u.cos(), ring * u.sin(), TORUS_MINOR * v.sin()]
        }
        ShapeKind::TwoPlanes => {
            let a = plane_half_width();
            let z = if rng.random::<bool>() {
                PLANE_OFFSET
            } else {
                -PLANE_OFFSET
            };
            [rng.random_range(-a..a), rng.random_range(-a..a), z]
        }
    }
}

/// Center on the centroid and scale so the farthest point has unit norm.
/// A cloud whose points all coincide maps to all-zero coordinates.
pub fn normalize_unit_sphere(pc: &PointCloud) -> PointCloud {
    let n = pc.coords.len().max(1) as f64;
    let mut c = [0.0; 3];
    for p in &pc.coords {
        for k in 0..3 {
            c[k] += p[k];
        }
    }
    for v in &mut c {
        *v /= n;
    }
    let mut coords: Vec<Point> = pc
        .coords
        .iter()
        .map(|p| [p[0] - c[0], p[1] - c[1], p[2] - c[2]])
        .collect();
    let r = coords
        .iter()
        .map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt())
        .fold(0.0f64, f64::max);
    // Relative threshold: anything below this is round-off around a single point.
    let extent = pc
        .coords
        .iter()
        .flat_map(|p| p.iter())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    if r <= 1e-12 * extent.max(f64::MIN_POSITIVE) || r == 0.0 {
        coords.iter_mut().for_each(|p| *p = [0.0; 3]);
    } else {
        for p in &mut coords {
            for v in p.iter_mut() {
                *v /= r;
            }
        }
    }
    PointCloud { coords, ..pc.clone() }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::PathBuf;

    fn parse(s: &str) -> Result<PointCloud> {
        parse_xyz(s, &PathBuf::from("mem.xyz"))
    }

    #[test]
    fn parses_plain_points() {
        let pc = parse("0 0 0\n1 0 0").unwrap();
        assert_eq!(pc.len(), 2);
        assert!(pc.features.is_none());
        assert_eq!(pc.coords[1], [1.0, 0.0, 0.0]);
    }

    #[test]
    fn comment_lines_are_skipped() {
        let pc = parse("# hdr\n0 0 0 1.5").unwrap();
        assert_eq!(pc.len(), 1);
        assert_eq!(pc.features, Some(vec![vec![1.5]]));
    }

    #[test]
    fn short_line_is_a_parse_error() {
        match parse("0 0\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn bad_token_reports_its_line() {
        match parse("0 0 0\n# c\n1 x 2\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn ragged_columns_are_a_format_error() {
        assert!(matches!(parse("0 0 0 1\n1 1 1\n"), Err(Error::Format { .. })));
    }

    #[test]
    fn empty_input() {
        assert!(matches!(parse("# only a comment\n\n"), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn zero_noise_sphere_is_on_the_unit_sphere() {
        let pc = make_synthetic(&SyntheticSpec {
            shape_kind: ShapeKind::Sphere,
            n_points: 64,
            noise_sigma: 0.0,
            seed: 1,
        })
        .unwrap();
        assert_eq!(pc.len(), 64);
        for p in &pc.coords {
            let r = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
            assert!((r - 1.0).abs() < 1e-9);
        }
        assert_eq!(pc.class_id, Some(0));
    }

    #[test]
    fn synthetic_is_seeded() {
        for kind in ShapeKind::ALL {
            let spec = SyntheticSpec {
                shape_kind: kind,
                n_points: 100,
                noise_sigma: 0.01,
                seed: 42,
            };
            assert_eq!(make_synthetic(&spec).unwrap(), make_synthetic(&spec).unwrap());
        }
    }

    #[test]
    fn synthetic_rejects_tiny_clouds() {
        let spec = SyntheticSpec {
            shape_kind: ShapeKind::Cube,
            n_points: 7,
            noise_sigma: 0.0,
            seed: 0,
        };
        assert!(make_synthetic(&spec).is_err());
    }

    #[test]
    fn every_ideal_surface_has_unit_max_radius() {
        for kind in ShapeKind::ALL {
            let pc = make_synthetic(&SyntheticSpec {
                shape_kind: kind,
                n_points: 4000,
                noise_sigma: 0.0,
                seed: 3,
            })
            .unwrap();
            let rmax = pc
                .coords
                .iter()
                .map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt())
                .fold(0.0, f64::max);
            assert!(rmax <= 1.0 + 1e-12, "{kind:?}: {rmax}");
            assert!(rmax > 0.9, "{kind:?}: {rmax}");
        }
    }

    #[test]
    fn normalize_center_and_scale() {
        let pc = PointCloud::new(vec![[2.0, 0.0, 0.0], [4.0, 0.0, 0.0]]).unwrap();
        let out = normalize_unit_sphere(&pc);
        assert_eq!(out.coords, vec![[-1.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
    }

    #[test]
    fn normalize_single_point_is_origin() {
        let pc = PointCloud::new(vec![[5.0, 5.0, 5.0]]).unwrap();
        assert_eq!(normalize_unit_sphere(&pc).coords, vec![[0.0; 3]]);
        let pc = PointCloud::new(vec![[0.1, -3.0, 7.0]; 5]).unwrap();
        assert!(normalize_unit_sphere(&pc).coords.iter().all(|p| *p == [0.0; 3]));
    }

    #[test]
    fn cloud_validation() {
        assert!(PointCloud::new(vec![]).is_err());
        assert!(PointCloud::new(vec![[f64::NAN, 0.0, 0.0]]).is_err());
        let mut pc = PointCloud::new(vec![[0.0; 3]; 2]).unwrap();
        pc.labels = Some(vec![1]);
        assert!(pc.validate().is_err());
    }
}
