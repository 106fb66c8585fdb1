//! Synthetic task families and episodic samplers.
//!
//! Two families stand in for real few-shot datasets: procedurally rendered
//! stroke glyphs on a 20x20 grid (classification, disjoint train/test class
//! splits) and sinusoid regression. Both are fully determined by
//! (kind, descriptor, seed).

use crate::error::{Error, Result};
use crate::recordio::{self, Record};
use crate::rng::SeedStream;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;

pub const GLYPH_GRID: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SinusoidDescriptor {
    pub amplitude_range: (f64, f64),
    pub phase_range: (f64, f64),
    pub x_range: (f64, f64),
}

impl Default for SinusoidDescriptor {
    fn default() -> Self {
        SinusoidDescriptor {
            amplitude_range: (0.1, 5.0),
            phase_range: (0.0, std::f64::consts::PI),
            x_range: (-5.0, 5.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlyphDescriptor {
    pub train_classes: usize,
    pub test_classes: usize,
    pub strokes: (usize, usize),
    /// degrees
    pub rotation_jitter: f64,
    /// pixels
    pub translation_jitter: f64,
    pub noise_sigma: f64,
}

impl Default for GlyphDescriptor {
    fn default() -> Self {
        GlyphDescriptor {
            train_classes: 64,
            test_classes: 24,
            strokes: (3, 6),
            rotation_jitter: 15.0,
            translation_jitter: 2.0,
            noise_sigma: 0.05,
        }
    }
}

#[derive(Debug, Clone)]
struct Stroke {
    x0: f64,
    y0: f64,
    x1: f64,
    y1: f64,
    width: f64,
}

#[derive(Debug, Clone)]
pub struct GlyphClass {
    strokes: Vec<Stroke>,
}

#[derive(Debug, Clone)]
pub enum TaskFamily {
    Sinusoid { desc: SinusoidDescriptor, seed: SeedStream },
    Glyph { desc: GlyphDescriptor, classes: Vec<GlyphClass>, seed: SeedStream },
}

/// One sinusoid task: y = A sin(x + phi).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SinusoidTask {
    pub amplitude: f64,
    pub phase: f64,
}

pub fn sinusoid_eval(task: &SinusoidTask, x: f64) -> f64 {
    task.amplitude * (x + task.phase).sin()
}

/// One few-shot classification task instance.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    /// [n_way * k_shot, 1, H, W]
    pub support_x: Tensor,
    pub support_y: Vec<usize>,
    /// [n_way * q, 1, H, W]
    pub target_x: Tensor,
    pub target_y: Vec<usize>,
    pub n_way: usize,
    pub k_shot: usize,
    pub q: usize,
    /// Class universe indices in label order: label `l` is `class_ids[l]`.
    pub class_ids: Vec<usize>,
}

/// Few-shot regression episode (sinusoid family).
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionEpisode {
    pub task: SinusoidTask,
    /// [k, 1]
    pub support_x: Tensor,
    pub support_y: Tensor,
    /// [q, 1]
    pub target_x: Tensor,
    pub target_y: Tensor,
}

pub fn make_sinusoid_family(desc: SinusoidDescriptor, seed: u64) -> Result<TaskFamily> {
    if desc.amplitude_range.0 > desc.amplitude_range.1
        || desc.phase_range.0 > desc.phase_range.1
        || desc.x_range.0 >= desc.x_range.1
    {
        return Err(Error::InvalidConfig("empty sinusoid descriptor range".into()));
    }
    Ok(TaskFamily::Sinusoid { desc, seed: SeedStream::new(seed) })
}

pub fn make_glyph_family(desc: GlyphDescriptor, seed: u64) -> Result<TaskFamily> {
    if desc.train_classes == 0 || desc.test_classes == 0 {
        return Err(Error::InvalidConfig("glyph family needs train and test classes".into()));
    }
    if desc.strokes.0 < 1 || desc.strokes.0 > desc.strokes.1 {
        return Err(Error::InvalidConfig("invalid stroke count range".into()));
    }
    let stream = SeedStream::new(seed);
    let total = desc.train_classes + desc.test_classes;
    let mut classes = Vec::with_capacity(total);
    for c in 0..total {
        let mut rng = stream.derive("class").derive_idx(c as u64).rng();
        let n_strokes = rng.gen_range(desc.strokes.0..=desc.strokes.1);
        let g = (GLYPH_GRID - 1) as f64;
        let strokes = (0..n_strokes)
            .map(|_| Stroke {
                x0: rng.gen_range(0.15 * g..0.85 * g),
                y0: rng.gen_range(0.15 * g..0.85 * g),
                x1: rng.gen_range(0.0..g),
                y1: rng.gen_range(0.0..g),
                width: rng.gen_range(0.8..1.8),
            })
            .collect();
        classes.push(GlyphClass { strokes });
    }
    Ok(TaskFamily::Glyph { desc, classes, seed: stream })
}

impl TaskFamily {
    pub fn split_class_indices(&self, split: Split) -> Result<Vec<usize>> {
        match self {
            TaskFamily::Glyph { desc, .. } => Ok(match split {
                Split::Train => (0..desc.train_classes).collect(),
                Split::Test => (desc.train_classes..desc.train_classes + desc.test_classes).collect(),
            }),
            TaskFamily::Sinusoid { .. } => {
                Err(Error::InvalidConfig("sinusoid family has no class splits".into()))
            }
        }
    }

    pub fn num_train_classes(&self) -> usize {
        match self {
            TaskFamily::Glyph { desc, .. } => desc.train_classes,
            TaskFamily::Sinusoid { .. } => 0,
        }
    }
}

/// Global render counter; timing code uses it to prove no data generation
/// happens inside a timed region.
static RENDER_COUNT: std::sync::atomic::AtomicU64 = std::sync::atomic::AtomicU64::new(0);

pub fn render_count() -> u64 {
    RENDER_COUNT.load(std::sync::atomic::Ordering::Relaxed)
}

/// Render one jittered instance of a glyph class into a [0,1] grid.
pub fn render_glyph(family: &TaskFamily, class_idx: usize, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    RENDER_COUNT.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
    let (desc, class) = match family {
        TaskFamily::Glyph { desc, classes, .. } => {
            let class = classes
                .get(class_idx)
                .ok_or_else(|| Error::InvalidConfig(format!("class index {class_idx} out of range")))?;
            (desc, class)
        }
        _ => return Err(Error::InvalidConfig("render_glyph on non-glyph family".into())),
    };
    let g = GLYPH_GRID as f64;
    let center = (g - 1.0) / 2.0;
    let theta = rng.gen_range(-desc.rotation_jitter..=desc.rotation_jitter).to_radians();
    let (sin_t, cos_t) = theta.sin_cos();
    let dx = rng.gen_range(-desc.translation_jitter..=desc.translation_jitter);
    let dy = rng.gen_range(-desc.translation_jitter..=desc.translation_jitter);
    let jitter = |x: f64, y: f64| {
        let (cx, cy) = (x - center, y - center);
        (center + cos_t * cx - sin_t * cy + dx, center + sin_t * cx + cos_t * cy + dy)
    };
    let strokes: Vec<Stroke> = class
        .strokes
        .iter()
        .map(|s| {
            let (x0, y0) = jitter(s.x0, s.y0);
            let (x1, y1) = jitter(s.x1, s.y1);
            Stroke { x0, y0, x1, y1, width: s.width }
        })
        .collect();
    let mut img = vec![0.0f64; GLYPH_GRID * GLYPH_GRID];
    for (i, px) in img.iter_mut().enumerate() {
        let y = (i / GLYPH_GRID) as f64;
        let x = (i % GLYPH_GRID) as f64;
        let mut v: f64 = 0.0;
        for s in &strokes {
            let d = point_segment_distance(x, y, s);
            // anti-aliased falloff over one pixel around the stroke edge
            let cov = (s.width / 2.0 + 0.5 - d).clamp(0.0, 1.0);
            v = v.max(cov);
        }
        *px = v;
    }
    // per-pixel gaussian noise, clamped back to [0,1]
    if desc.noise_sigma > 0.0 {
        for px in img.iter_mut() {
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let z = (-2.0 * u1.ln()).sqrt() * u2.cos();
            *px = (*px + desc.noise_sigma * z).clamp(0.0, 1.0);
        }
    }
    Tensor::new(vec![1, GLYPH_GRID, GLYPH_GRID], img)
}

fn point_segment_distance(px: f64, py: f64, s: &Stroke) -> f64 {
    let (vx, vy) = (s.x1 - s.x0, s.y1 - s.y0);
    let (wx, wy) = (px - s.x0, py - s.y0);
    let len2 = vx * vx + vy * vy;
    let t = if len2 > 0.0 { ((wx * vx + wy * vy) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let (cx, cy) = (s.x0 + t * vx, s.y0 + t * vy);
    ((px - cx).powi(2) + (py - cy).powi(2)).sqrt()
}

/// Sample one N-way k-shot episode with a fresh class-to-label permutation.
pub fn sample_episode(
    family: &TaskFamily,
    split: Split,
    n_way: usize,
    k_shot: usize,
    q: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Episode> {
    let pool = family.split_class_indices(split)?;
    if pool.len() < n_way {
        return Err(Error::InsufficientClasses { have: pool.len(), need: n_way });
    }
    // choosing classes by shuffle and assigning labels by position gives the
    // per-episode label permutation
    let mut shuffled = pool;
    shuffled.shuffle(rng);
    let chosen = &shuffled[..n_way];

    let img = GLYPH_GRID * GLYPH_GRID;
    let mut support_data = Vec::with_capacity(n_way * k_shot * img);
    let mut support_y = Vec::with_capacity(n_way * k_shot);
    let mut target_data = Vec::with_capacity(n_way * q * img);
    let mut target_y = Vec::with_capacity(n_way * q);
    for (label, &class_idx) in chosen.iter().enumerate() {
        for _ in 0..k_shot {
            let t = render_glyph(family, class_idx, rng)?;
            support_data.extend_from_slice(t.data());
            support_y.push(label);
        }
        for _ in 0..q {
            let t = render_glyph(family, class_idx, rng)?;
            target_data.extend_from_slice(t.data());
            target_y.push(label);
        }
    }
    Ok(Episode {
        support_x: Tensor::new(vec![n_way * k_shot, 1, GLYPH_GRID, GLYPH_GRID], support_data)?,
        support_y,
        target_x: Tensor::new(vec![n_way * q, 1, GLYPH_GRID, GLYPH_GRID], target_data)?,
        target_y,
        n_way,
        k_shot,
        q,
        class_ids: chosen.to_vec(),
    })
}

pub fn sample_sinusoid_task(family: &TaskFamily, rng: &mut ChaCha8Rng) -> Result<SinusoidTask> {
    match family {
        TaskFamily::Sinusoid { desc, .. } => {
            let (a0, a1) = desc.amplitude_range;
            let (p0, p1) = desc.phase_range;
            let amplitude = if a1 > a0 { rng.gen_range(a0..a1) } else { a0 };
            let phase = if p1 > p0 { rng.gen_range(p0..p1) } else { p0 };
            Ok(SinusoidTask { amplitude, phase })
        }
        _ => Err(Error::InvalidConfig("sample_sinusoid_task on non-sinusoid family".into())),
    }
}

pub fn sample_sinusoid_episode(
    family: &TaskFamily,
    k: usize,
    q: usize,
    rng: &mut ChaCha8Rng,
) -> Result<RegressionEpisode> {
    let task = sample_sinusoid_task(family, rng)?;
    let (x0, x1) = match family {
        TaskFamily::Sinusoid { desc, .. } => desc.x_range,
        _ => unreachable!(),
    };
    let sample = |n: usize, rng: &mut ChaCha8Rng| -> (Tensor, Tensor) {
        let xs: Vec<f64> = (0..n).map(|_| rng.gen_range(x0..x1)).collect();
        let ys: Vec<f64> = xs.iter().map(|&x| sinusoid_eval(&task, x)).collect();
        (
            Tensor::new(vec![n, 1], xs).expect("shape"),
            Tensor::new(vec![n, 1], ys).expect("shape"),
        )
    };
    let (support_x, support_y) = sample(k, rng);
    let (target_x, target_y) = sample(q, rng);
    Ok(RegressionEpisode { task, support_x, support_y, target_x, target_y })
}

// ---- episode dump format (debugging) --------------------------------------

pub const MLEP_MAGIC: &[u8; 4] = b"MLEP";

pub fn write_episode(ep: &Episode, path: &Path) -> Result<()> {
    let records = vec![
        Record::tensor("support_x", &ep.support_x),
        Record::labels("support_y", &ep.support_y),
        Record::tensor("target_x", &ep.target_x),
        Record::labels("target_y", &ep.target_y),
        Record::labels("class_ids", &ep.class_ids),
    ];
    recordio::write_records(path, MLEP_MAGIC, &records)
}

pub fn read_episode(path: &Path) -> Result<Episode> {
    let records = recordio::read_records(path, MLEP_MAGIC)?;
    let support_x = recordio::find(&records, "support_x")?.as_tensor()?;
    let support_y = recordio::find(&records, "support_y")?.as_labels()?;
    let target_x = recordio::find(&records, "target_x")?.as_tensor()?;
    let target_y = recordio::find(&records, "target_y")?.as_labels()?;
    let class_ids = recordio::find(&records, "class_ids")?.as_labels()?;
    let n_way = class_ids.len();
    if n_way == 0 || support_y.len() % n_way != 0 || target_y.len() % n_way != 0 {
        return Err(Error::BadFormat("inconsistent episode dump".into()));
    }
    Ok(Episode {
        k_shot: support_y.len() / n_way,
        q: target_y.len() / n_way,
        support_x,
        support_y,
        target_x,
        target_y,
        n_way,
        class_ids,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn glyph_family(seed: u64) -> TaskFamily {
        make_glyph_family(GlyphDescriptor::default(), seed).unwrap()
    }

    #[test]
    fn family_is_deterministic() {
        let f1 = glyph_family(3);
        let f2 = glyph_family(3);
        let mut r1 = SeedStream::new(9).rng();
        let mut r2 = SeedStream::new(9).rng();
        let a = render_glyph(&f1, 5, &mut r1).unwrap();
        let b = render_glyph(&f2, 5, &mut r2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn split_classes_disjoint() {
        let f = glyph_family(1);
        let train: HashSet<_> = f.split_class_indices(Split::Train).unwrap().into_iter().collect();
        let test: HashSet<_> = f.split_class_indices(Split::Test).unwrap().into_iter().collect();
        assert_eq!(train.len(), 64);
        assert_eq!(test.len(), 24);
        assert!(train.is_disjoint(&test));
    }

    #[test]
    fn degenerate_amplitude_range() {
        let f = make_sinusoid_family(
            SinusoidDescriptor { amplitude_range: (2.0, 2.0), ..Default::default() },
            0,
        )
        .unwrap();
        let mut rng = SeedStream::new(0).rng();
        for _ in 0..20 {
            let t = sample_sinusoid_task(&f, &mut rng).unwrap();
            assert_eq!(t.amplitude, 2.0);
        }
    }

    #[test]
    fn sinusoid_eval_cases() {
        let t = SinusoidTask { amplitude: 1.0, phase: 0.0 };
        assert_eq!(sinusoid_eval(&t, 0.0), 0.0);
        assert!((sinusoid_eval(&t, std::f64::consts::FRAC_PI_2) - 1.0).abs() < 1e-15);
        let t2 = SinusoidTask { amplitude: 2.5, phase: 0.3 };
        assert!((sinusoid_eval(&t2, 1.1) - 2.5 * (1.4f64).sin()).abs() < 1e-12);
    }

    #[test]
    fn episode_shape_and_balance() {
        let f = glyph_family(2);
        let mut rng = SeedStream::new(5).rng();
        let ep = sample_episode(&f, Split::Train, 5, 1, 15, &mut rng).unwrap();
        assert_eq!(ep.support_x.shape(), &[5, 1, 20, 20]);
        assert_eq!(ep.target_x.shape(), &[75, 1, 20, 20]);
        for label in 0..5 {
            assert_eq!(ep.support_y.iter().filter(|&&l| l == label).count(), 1);
            assert_eq!(ep.target_y.iter().filter(|&&l| l == label).count(), 15);
        }
        assert!(ep.support_x.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn identical_rng_state_identical_episode() {
        let f = glyph_family(2);
        let mut r1 = SeedStream::new(42).rng();
        let mut r2 = SeedStream::new(42).rng();
        let a = sample_episode(&f, Split::Test, 5, 1, 5, &mut r1).unwrap();
        let b = sample_episode(&f, Split::Test, 5, 1, 5, &mut r2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn insufficient_classes_rejected() {
        let f = make_glyph_family(
            GlyphDescriptor { train_classes: 3, test_classes: 2, ..Default::default() },
            0,
        )
        .unwrap();
        let mut rng = SeedStream::new(0).rng();
        assert!(sample_episode(&f, Split::Test, 5, 1, 1, &mut rng).is_err());
    }

    #[test]
    fn label_permutations_vary_across_episodes() {
        // over 1000 draws the chance that consecutive episodes use the same
        // class-to-label assignment is tiny; require at least 900 differing
        let f = glyph_family(7);
        let mut rng = SeedStream::new(13).rng();
        let mut differing = 0;
        let mut prev: Option<Vec<usize>> = None;
        for _ in 0..1000 {
            let ep = sample_episode(&f, Split::Train, 5, 1, 1, &mut rng).unwrap();
            let classes = ep.class_ids.clone();
            if let Some(p) = &prev {
                if *p != classes {
                    differing += 1;
                }
            }
            prev = Some(classes);
        }
        assert!(differing > 900);
    }

    #[test]
    fn episode_dump_roundtrip() {
        let f = glyph_family(2);
        let mut rng = SeedStream::new(8).rng();
        let ep = sample_episode(&f, Split::Train, 3, 2, 2, &mut rng).unwrap();
        let dir = std::env::temp_dir().join("metalab_mlep_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("ep.mlep");
        write_episode(&ep, &path).unwrap();
        let back = read_episode(&path).unwrap();
        assert_eq!(back, ep);
    }
}
