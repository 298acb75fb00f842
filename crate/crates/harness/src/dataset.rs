//! Synthetic point-cloud classification data.
//!
//! Six parametric shapes with per-sample random rotation, mild anisotropic
//! scale jitter, and optional Gaussian noise, every sample rescaled to the
//! unit sphere. When fewer than six classes are requested the shapes are
//! regrouped round-robin (`shape s → class s mod classes`), which is how
//! the shifted fine-tuning task is built.
//!
//! On-disk layout (little-endian): magic `MSPC`, version u16, sample count
//! u32, class count u16; per sample a u32 label, u32 point count, then
//! `N×3` f32 coordinates.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use most_core::error::{Error, Result};
use most_core::geometry::PointCloud;
use most_core::rng::Rng;
use most_core::tensor::Tensor;
use serde::{Deserialize, Serialize};

pub const MAGIC: &[u8; 4] = b"MSPC";
pub const VERSION: u16 = 1;
pub const SHAPE_COUNT: usize = 6;

#[derive(Debug, Clone)]
pub struct Sample {
    pub label: u32,
    pub cloud: PointCloud,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub classes: u16,
    pub samples: Vec<Sample>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenConfig {
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub points: usize,
    pub noise: f64,
    /// Fraction of points replaced by uniform outliers inside the unit
    /// ball, emulating background clutter.
    #[serde(default)]
    pub outliers: f64,
    /// Anisotropic deformation: per-axis scale drawn from
    /// `[1−stretch, 1+stretch]` in the shape frame. Zero keeps shapes
    /// undeformed (and noiseless spheres exactly unit-radius).
    #[serde(default)]
    pub stretch: f64,
    /// Random SO(3) pose per sample; canonical orientation when false.
    #[serde(default = "default_random_pose")]
    pub random_pose: bool,
    pub seed: u64,
}

fn default_random_pose() -> bool {
    true
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.classes > SHAPE_COUNT {
            return Err(Error::config(format!(
                "classes must be in 1..={SHAPE_COUNT}, got {}",
                self.classes
            )));
        }
        if self.train_per_class == 0 || self.points < 8 {
            return Err(Error::config("need at least one sample and ≥8 points"));
        }
        if self.noise < 0.0 {
            return Err(Error::config("noise must be nonnegative"));
        }
        if !(0.0..=1.0).contains(&self.outliers) {
            return Err(Error::config("outlier fraction must be in [0, 1]"));
        }
        if !(0.0..1.0).contains(&self.stretch) {
            return Err(Error::config("stretch must be in [0, 1)"));
        }
        Ok(())
    }
}

fn shape_point(shape: usize, rng: &mut Rng) -> [f64; 3] {
    match shape {
        // Sphere: uniform direction, radius 1.
        0 => {
            let (mut x, mut y, mut z);
            loop {
                x = rng.next_normal();
                y = rng.next_normal();
                z = rng.next_normal();
                let n = (x * x + y * y + z * z).sqrt();
                if n > 1e-9 {
                    x /= n;
                    y /= n;
                    z /= n;
                    break;
                }
            }
            [x, y, z]
        }
        // Box surface, side 1.6.
        1 => {
            let face = rng.next_below(6);
            let u = rng.uniform(-0.8, 0.8);
            let v = rng.uniform(-0.8, 0.8);
            match face {
                0 => [0.8, u, v],
                1 => [-0.8, u, v],
                2 => [u, 0.8, v],
                3 => [u, -0.8, v],
                4 => [u, v, 0.8],
                _ => [u, v, -0.8],
            }
        }
        // Torus, R = 0.7, r = 0.3.
        2 => {
            let phi = rng.uniform(0.0, std::f64::consts::TAU);
            let theta = rng.uniform(0.0, std::f64::consts::TAU);
            let w = 0.7 + 0.3 * theta.cos();
            [w * phi.cos(), w * phi.sin(), 0.3 * theta.sin()]
        }
        // Cylinder, radius 0.5, height 1.8, lateral surface and caps
        // sampled by area.
        3 => {
            let lateral_area = std::f64::consts::TAU * 0.5 * 1.8;
            let cap_area = 2.0 * std::f64::consts::PI * 0.25;
            if rng.next_f64() < lateral_area / (lateral_area + cap_area) {
                let phi = rng.uniform(0.0, std::f64::consts::TAU);
                [0.5 * phi.cos(), 0.5 * phi.sin(), rng.uniform(-0.9, 0.9)]
            } else {
                let phi = rng.uniform(0.0, std::f64::consts::TAU);
                let r = 0.5 * rng.next_f64().sqrt();
                let z = if rng.next_f64() < 0.5 { 0.9 } else { -0.9 };
                [r * phi.cos(), r * phi.sin(), z]
            }
        }
        // Cone: apex up, base radius 0.8, sampled by lateral area.
        4 => {
            let t = rng.next_f64().sqrt();
            let phi = rng.uniform(0.0, std::f64::consts::TAU);
            let r = 0.8 * t;
            [r * phi.cos(), r * phi.sin(), 0.9 - 1.8 * t]
        }
        // Helix: two turns with a thin Gaussian tube.
        _ => {
            let t = rng.uniform(0.0, 2.0 * std::f64::consts::TAU);
            let z = -0.9 + 1.8 * t / (2.0 * std::f64::consts::TAU);
            [
                0.7 * t.cos() + 0.05 * rng.next_normal(),
                0.7 * t.sin() + 0.05 * rng.next_normal(),
                z + 0.05 * rng.next_normal(),
            ]
        }
    }
}

/// Uniform random rotation from a normalized quaternion.
fn random_rotation(rng: &mut Rng) -> [[f64; 3]; 3] {
    let (mut q, mut n);
    loop {
        q = [rng.next_normal(), rng.next_normal(), rng.next_normal(), rng.next_normal()];
        n = (q.iter().map(|v| v * v).sum::<f64>()).sqrt();
        if n > 1e-9 {
            break;
        }
    }
    let [w, x, y, z] = [q[0] / n, q[1] / n, q[2] / n, q[3] / n];
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

fn make_sample(shape: usize, cfg: &GenConfig, rng: &mut Rng) -> Result<PointCloud> {
    let rot = if cfg.random_pose {
        random_rotation(rng)
    } else {
        [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
    };
    // Isotropic jitter: normalization removes global scale, but the jitter
    // still changes each sample's signal-to-noise ratio against the
    // absolute noise σ, and keeps the unit-sphere invariant exact for
    // noiseless spheres. The optional anisotropic stretch deforms shapes
    // in their canonical frame.
    let scale = rng.uniform(0.9, 1.1);
    let stretch = [
        scale * rng.uniform(1.0 - cfg.stretch, 1.0 + cfg.stretch),
        scale * rng.uniform(1.0 - cfg.stretch, 1.0 + cfg.stretch),
        scale * rng.uniform(1.0 - cfg.stretch, 1.0 + cfg.stretch),
    ];
    let mut data = Vec::with_capacity(cfg.points * 3);
    for _ in 0..cfg.points {
        let p = shape_point(shape, rng);
        let s = [p[0] * stretch[0], p[1] * stretch[1], p[2] * stretch[2]];
        for row in &rot {
            let mut v = row[0] * s[0] + row[1] * s[1] + row[2] * s[2];
            if cfg.noise > 0.0 {
                v += cfg.noise * rng.next_normal();
            }
            data.push(v);
        }
    }
    let mut cloud = PointCloud::new(Tensor::new(vec![cfg.points, 3], data)?)?;
    cloud.normalize_unit_sphere();
    if cfg.outliers > 0.0 {
        let t = cloud.points().clone();
        let mut t = t;
        let n = t.shape()[0];
        for i in 0..n {
            if rng.next_f64() < cfg.outliers {
                // Uniform in the unit ball by rejection.
                loop {
                    let p = [
                        rng.uniform(-1.0, 1.0),
                        rng.uniform(-1.0, 1.0),
                        rng.uniform(-1.0, 1.0),
                    ];
                    if p[0] * p[0] + p[1] * p[1] + p[2] * p[2] <= 1.0 {
                        for d in 0..3 {
                            t.set(&[i, d], p[d]);
                        }
                        break;
                    }
                }
            }
        }
        cloud = PointCloud::new(t)?;
    }
    // Round-trip through the on-disk f32 precision so in-memory and
    // reloaded datasets agree exactly.
    let mut t = cloud.points().clone();
    for v in t.data_mut() {
        *v = *v as f32 as f64;
    }
    PointCloud::new(t)
}

fn shapes_for_class(class: usize, classes: usize) -> Vec<usize> {
    (0..SHAPE_COUNT).filter(|s| s % classes == class).collect()
}

fn generate_split(cfg: &GenConfig, per_class: usize, stream_tag: u64) -> Result<Dataset> {
    let root = Rng::seed_from_u64(cfg.seed).derive(stream_tag);
    let mut samples = Vec::with_capacity(cfg.classes * per_class);
    for class in 0..cfg.classes {
        let shapes = shapes_for_class(class, cfg.classes);
        for i in 0..per_class {
            let shape = shapes[i % shapes.len()];
            let mut rng = root.derive((class * per_class + i) as u64);
            let cloud = make_sample(shape, cfg, &mut rng)?;
            samples.push(Sample { label: class as u32, cloud });
        }
    }
    Ok(Dataset { classes: cfg.classes as u16, samples })
}

/// Deterministic train/test datasets for the given generator config.
pub fn generate(cfg: &GenConfig) -> Result<(Dataset, Dataset)> {
    cfg.validate()?;
    let train = generate_split(cfg, cfg.train_per_class, 0x7121)?;
    let test = generate_split(cfg, cfg.test_per_class.max(1), 0x7e57)?;
    Ok((train, test))
}

pub fn save(ds: &Dataset, path: &Path) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let count = u32::try_from(ds.samples.len())
        .map_err(|_| Error::Format("too many samples".into()))?;
    w.write_all(&count.to_le_bytes())?;
    w.write_all(&ds.classes.to_le_bytes())?;
    for s in &ds.samples {
        w.write_all(&s.label.to_le_bytes())?;
        let n = s.cloud.len() as u32;
        w.write_all(&n.to_le_bytes())?;
        for &v in s.cloud.points().data() {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Format(format!("truncated dataset while reading {what}")))
}

pub fn load(path: &Path) -> Result<Dataset> {
    let file = File::open(path)?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}, expected {MAGIC:?}")));
    }
    let mut b2 = [0u8; 2];
    read_exact(&mut r, &mut b2, "version")?;
    if u16::from_le_bytes(b2) != VERSION {
        return Err(Error::Format("unsupported dataset version".into()));
    }
    let mut b4 = [0u8; 4];
    read_exact(&mut r, &mut b4, "sample count")?;
    let count = u32::from_le_bytes(b4) as usize;
    read_exact(&mut r, &mut b2, "class count")?;
    let classes = u16::from_le_bytes(b2);
    if classes == 0 {
        return Err(Error::Format("dataset declares zero classes".into()));
    }

    let mut samples = Vec::with_capacity(count);
    for _ in 0..count {
        read_exact(&mut r, &mut b4, "label")?;
        let label = u32::from_le_bytes(b4);
        if label >= classes as u32 {
            return Err(Error::Format(format!(
                "label {label} outside 0..{classes}"
            )));
        }
        read_exact(&mut r, &mut b4, "point count")?;
        let n = u32::from_le_bytes(b4) as usize;
        let mut data = Vec::with_capacity(n * 3);
        for _ in 0..n * 3 {
            read_exact(&mut r, &mut b4, "coordinates")?;
            data.push(f32::from_le_bytes(b4) as f64);
        }
        let cloud = PointCloud::new(Tensor::new(vec![n, 3], data)?)?;
        samples.push(Sample { label, cloud });
    }
    Ok(Dataset { classes, samples })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> GenConfig {
        GenConfig {
            classes: 6,
            train_per_class: 3,
            test_per_class: 2,
            points: 64,
            noise: 0.0,
            outliers: 0.0,
            stretch: 0.0,
            random_pose: true,
            seed: 11,
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let (a, _) = generate(&cfg()).unwrap();
        let (b, _) = generate(&cfg()).unwrap();
        for (x, y) in a.samples.iter().zip(&b.samples) {
            assert_eq!(x.label, y.label);
            assert_eq!(x.cloud.points().data(), y.cloud.points().data());
        }
    }

    #[test]
    fn noiseless_spheres_sit_on_unit_sphere() {
        let mut c = cfg();
        c.classes = 6; // class 0 = sphere only
        let (train, _) = generate(&c).unwrap();
        for s in train.samples.iter().filter(|s| s.label == 0) {
            for i in 0..s.cloud.len() {
                let r = s.cloud.points().row(i);
                let norm = (r[0] * r[0] + r[1] * r[1] + r[2] * r[2]).sqrt();
                assert!((norm - 1.0).abs() < 1e-6, "radius {norm}");
            }
        }
    }

    #[test]
    fn labels_are_uniform() {
        let (train, _) = generate(&cfg()).unwrap();
        let mut hist = [0usize; 6];
        for s in &train.samples {
            hist[s.label as usize] += 1;
        }
        assert!(hist.iter().all(|&h| h == 3));
    }

    #[test]
    fn save_load_roundtrip_and_truncation() {
        let dir = std::env::temp_dir().join("most_dataset_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("d.mspc");
        let (train, _) = generate(&cfg()).unwrap();
        save(&train, &path).unwrap();
        let loaded = load(&path).unwrap();
        assert_eq!(loaded.samples.len(), train.samples.len());
        for (a, b) in train.samples.iter().zip(&loaded.samples) {
            assert_eq!(a.label, b.label);
            assert_eq!(a.cloud.points().data(), b.cloud.points().data());
        }
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        match load(&path) {
            Err(Error::Format(msg)) => assert!(msg.contains("truncated")),
            other => panic!("expected format error, got {other:?}"),
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn regrouping_covers_all_shapes() {
        assert_eq!(shapes_for_class(0, 4), vec![0, 4]);
        assert_eq!(shapes_for_class(1, 4), vec![1, 5]);
        assert_eq!(shapes_for_class(2, 4), vec![2]);
        assert_eq!(shapes_for_class(3, 4), vec![3]);
    }
}
